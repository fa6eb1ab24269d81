"""Command-line surface.

    lightcap {pretrain|finetune|distill|caption|evaluate|retrieve-concepts|profile}
             [--config PATH] [--seed N] [--threads N] [command flags]

Exit codes: 0 success, 2 usage error, 1 runtime error. LIGHTCAP_LOG
controls stderr logging (error, info, debug).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from .errors import LightCapError, UsageError

log = logging.getLogger("lightcap")


def _setup_logging() -> None:
    level = os.environ.get("LIGHTCAP_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(
        stream=sys.stderr,
        level=levels.get(level, logging.ERROR),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _limit_threads(n: int | None):
    if n is None:
        return None
    try:
        import threadpoolctl

        return threadpoolctl.threadpool_limits(limits=n)
    except ImportError:  # best effort; document in the README
        os.environ["OMP_NUM_THREADS"] = str(n)
        os.environ["OPENBLAS_NUM_THREADS"] = str(n)
        log.warning("threadpoolctl unavailable; set env hints only")
        return None


def _load_config(args) -> "RunConfig":
    from .config import RunConfig, load_run_config

    config = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lightcap",
        description="Lightweight image captioning: training, distillation, "
        "generation, evaluation, profiling.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_parser(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    for name in ("pretrain", "finetune"):
        p = add_parser(name, help=f"{name} on a JSONL dataset")
        p.add_argument("--dataset", help="override config dataset path")
        p.add_argument("--vocab", help="override config vocab path")
        p.add_argument("--checkpoint-out", help="where to write the checkpoint")
        p.add_argument("--log-out", help="where to write the loss log (JSONL)")
        p.add_argument("--steps", type=int)

    p = add_parser("distill", help="distill a student from teacher checkpoints")
    p.add_argument("--teacher", action="append", default=[],
                   help="teacher checkpoint (repeatable)")
    p.add_argument("--dataset")
    p.add_argument("--vocab")
    p.add_argument("--checkpoint-out")
    p.add_argument("--log-out")
    p.add_argument("--steps", type=int)
    p.add_argument("--stage", choices=["pretrain", "finetune"])

    p = add_parser("caption", help="caption one image")
    p.add_argument("--features", required=True, help="grid feature tensor file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--regions", help="region JSONL file (for concept retrieval)")
    p.add_argument("--image-id", help="row of the region file to use")
    p.add_argument("--concepts", help="comma-separated concept words (skips retrieval)")
    p.add_argument("--concept-vocab-names", help="concept vocabulary names file")
    p.add_argument("--concept-vocab-emb", help="concept vocabulary embedding file")
    p.add_argument("--alignment", help="alignment head checkpoint")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--greedy", action="store_true", help="equivalent to --beam 1")
    p.add_argument("--max-len", type=int, default=20)
    p.add_argument("--verbose", action="store_true",
                   help="print concepts and per-stage timings")

    p = add_parser("evaluate", help="score predictions with BLEU@4 and CIDEr")
    p.add_argument("--pred", required=True,
                   help="JSONL with candidates (and references, if --refs absent)")
    p.add_argument("--refs", help="JSONL with references keyed by id")

    p = add_parser("retrieve-concepts", help="top-K concepts for one image")
    p.add_argument("--features", required=True)
    p.add_argument("--regions")
    p.add_argument("--image-id")
    p.add_argument("--concept-vocab-names", required=True)
    p.add_argument("--concept-vocab-emb", required=True)
    p.add_argument("--alignment", required=True)
    p.add_argument("--top-k", type=int, default=20)

    p = add_parser("profile", help="parameter/FLOPs budget, optional latency")
    p.add_argument("--preset", choices=["production", "desk"], default="production")
    p.add_argument("--seq-len", type=int, default=90)
    p.add_argument("--decode-steps", type=int, default=12)
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("--no-backbones", action="store_true",
                   help="skip the declarative encoder/detector stand-ins")

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    limiter = _limit_threads(args.threads)
    try:
        return _dispatch(parser, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except LightCapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.unregister()


def _dispatch(parser, args) -> int:
    if args.command in ("pretrain", "finetune"):
        config = _config_with_overrides(args)
        from .run import train

        _, logs = train(config, args.command)
        print(json.dumps({"final": logs[-1]}, sort_keys=True))
        return 0

    if args.command == "distill":
        config = _config_with_overrides(args)
        if args.teacher:
            config = dataclasses.replace(config, teachers=tuple(args.teacher))
        if args.stage:
            config = dataclasses.replace(config, kd_stage=args.stage)
        if not config.teachers:
            parser.error("distill requires at least one --teacher checkpoint")
        from .run import distill

        _, logs = distill(config)
        print(json.dumps({"final": logs[-1]}, sort_keys=True))
        return 0

    if args.command == "caption":
        return _cmd_caption(args)

    if args.command == "evaluate":
        from .run import evaluate_files

        print(json.dumps(evaluate_files(args.pred, args.refs), sort_keys=True))
        return 0

    if args.command == "retrieve-concepts":
        return _cmd_retrieve(args)

    if args.command == "profile":
        return _cmd_profile(args)

    parser.error(f"unknown command {args.command!r}")
    return 2


def _config_with_overrides(args):
    config = _load_config(args)
    overrides = {}
    for name in ("dataset", "vocab", "checkpoint_out", "log_out", "steps"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return dataclasses.replace(config, **overrides)


def _regions_for(args):
    from .vision import load_regions_file

    if not args.regions:
        return None
    table = load_regions_file(args.regions)
    if args.image_id:
        if args.image_id not in table:
            raise UsageError(f"image id {args.image_id!r} not in region file")
        return table[args.image_id]
    return next(iter(table.values()))


def _cmd_caption(args) -> int:
    from .checkpoint import load_model
    from .pipeline import caption_image
    from .tokenizer import load_vocab
    from .vision import load_grid_features

    model = load_model(args.checkpoint)
    vocab = load_vocab(args.vocab)
    grid = load_grid_features(args.features)
    concept_names = args.concepts.split(",") if args.concepts else None
    alignment = None
    concept_vocab = None
    if concept_names is None and args.concept_vocab_names:
        from .concepts import load_concept_vocabulary

        concept_vocab = load_concept_vocabulary(
            args.concept_vocab_names, args.concept_vocab_emb
        )
        alignment = _load_alignment(args.alignment) if args.alignment else None
    beam = 1 if args.greedy else args.beam
    result = caption_image(
        model,
        vocab,
        grid,
        regions=_regions_for(args),
        concept_names=concept_names,
        alignment=alignment,
        concept_vocab=concept_vocab,
        beam_size=beam,
        max_len=args.max_len,
        timings=args.verbose,
    )
    print(result.caption)
    if args.verbose:
        print(json.dumps(
            {"concepts": result.concepts, "stage_ms": result.stage_ms},
            sort_keys=True,
        ), file=sys.stderr)
    return 0


def _load_alignment(path):
    import numpy as np

    from .concepts import AlignmentMLP
    from .tensor import Tensor
    from .tensorfile import load_tensor

    # alignment checkpoints are one tensor file per weight, side by side
    base = path
    mlp = AlignmentMLP.__new__(AlignmentMLP)

    for attr, name in (("w1", "w1"), ("b1", "b1"), ("w2", "w2"), ("b2", "b2"),
                       ("temperature", "temperature")):
        arr = load_tensor(f"{base}.{name}.lten")
        setattr(mlp, attr, Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True))
    return mlp


def save_alignment(path, mlp) -> None:
    from .tensorfile import save_tensor

    for attr, name in (("w1", "w1"), ("b1", "b1"), ("w2", "w2"), ("b2", "b2"),
                       ("temperature", "temperature")):
        save_tensor(f"{path}.{name}.lten", getattr(mlp, attr).data)


def _cmd_retrieve(args) -> int:
    from .concepts import AlignmentMLP, load_concept_vocabulary, retrieve_concepts
    from .vision import load_grid_features, uniform_proposals

    concept_vocab = load_concept_vocabulary(
        args.concept_vocab_names, args.concept_vocab_emb
    )
    mlp = _load_alignment(args.alignment)
    grid = load_grid_features(args.features)
    regions = _regions_for(args) or uniform_proposals(3)
    found = retrieve_concepts(grid, regions, mlp, concept_vocab, args.top_k)
    print(json.dumps({"concepts": found.items}, sort_keys=True))
    return 0


def _cmd_profile(args) -> int:
    from .model import CaptionModel, desk_config, production_config
    from .profiler import build_budget_report

    config = production_config() if args.preset == "production" else desk_config()
    model = CaptionModel(config, seed=0)
    report = build_budget_report(
        model,
        seq_len=args.seq_len,
        decode_steps=args.decode_steps,
        include_backbones=not args.no_backbones,
    )
    if args.json:
        print(json.dumps(report.to_dict(), sort_keys=True))
    else:
        print(report.render())
    return 0


if __name__ == "__main__":
    sys.exit(main())
