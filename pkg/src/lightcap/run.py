"""Workflow implementations behind the command-line surface.

Training is deterministic given (seed, thread count): batches walk the
dataset round-robin, per-item sampling streams derive from
(seed, step, item index), and loss logs carry no timestamps, so two runs
with the same seed produce identical logs and checkpoints byte for byte.
"""

from __future__ import annotations

import json
import logging

import numpy as np

from . import tensor as T
from .checkpoint import load_model, save_checkpoint
from .config import RunConfig
from .data import concept_pool, load_dataset
from .distill import KDPlan, freeze, random_adapter, stage_loss
from .errors import UsageError
from .metrics import bleu4, cider, load_eval_file
from .model import CaptionModel
from .objectives import (
    assemble_finetune_item,
    assemble_pretrain_item,
    finetune_loss,
    pretrain_loss,
)
from .optim import AdamW
from .tokenizer import load_vocab

log = logging.getLogger("lightcap")

PRETRAIN = "pretrain"
FINETUNE = "finetune"


def _require(config: RunConfig, *fields):
    for name in fields:
        if getattr(config, name) in (None, ()):
            raise UsageError(f"config field {name!r} is required for this command")


def _batch_indices(step: int, batch_size: int, n_items: int) -> list[int]:
    return [(step * batch_size + k) % n_items for k in range(batch_size)]


def _assemble(config: RunConfig, stage: str, items, pool, step: int, indices):
    batch = []
    for i in indices:
        if stage == PRETRAIN:
            rng = np.random.default_rng((config.seed, step, i))
            batch.append(
                assemble_pretrain_item(
                    items[i], config.model, rng, pool,
                    mask_rate=config.mask_rate,
                    pollution_prob=config.pollution_prob,
                )
            )
        else:
            batch.append(assemble_finetune_item(items[i], config.model))
    return batch


def _write_outputs(config: RunConfig, model: CaptionModel, logs: list[dict]):
    if config.log_out:
        with open(config.log_out, "w", encoding="utf-8") as fh:
            for entry in logs:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    if config.checkpoint_out:
        save_checkpoint(config.checkpoint_out, model)


def train(config: RunConfig, stage: str) -> tuple[CaptionModel, list[dict]]:
    """Plain pre-training or fine-tuning, no distillation."""
    _require(config, "dataset", "vocab")
    vocab = load_vocab(config.vocab)
    _check_vocab(config, vocab)
    items = load_dataset(config.dataset, vocab, max_caption_len=config.max_len)
    pool = concept_pool(items)
    model = CaptionModel(config.model, seed=config.seed)
    opt = AdamW(model.parameters(), lr=config.lr, beta1=config.beta1,
                beta2=config.beta2, weight_decay=config.weight_decay)
    logs = []
    for step in range(config.steps):
        indices = _batch_indices(step, config.batch_size, len(items))
        batch = _assemble(config, stage, items, pool, step, indices)
        loss = (pretrain_loss if stage == PRETRAIN else finetune_loss)(model, batch)
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        model.step += 1
        if step % config.log_every == 0 or step == config.steps - 1:
            entry = {"step": step, "loss": loss.item(), "stage": stage}
            logs.append(entry)
            log.info("step %d %s loss %.6f", step, stage, loss.item())
    _write_outputs(config, model, logs)
    return model, logs


def distill(config: RunConfig) -> tuple[CaptionModel, list[dict]]:
    """Train a student against frozen teachers with the staged KD losses."""
    _require(config, "dataset", "vocab", "teachers")
    vocab = load_vocab(config.vocab)
    _check_vocab(config, vocab)
    items = load_dataset(config.dataset, vocab, max_caption_len=config.max_len)
    pool = concept_pool(items)
    teachers = [freeze(load_model(path)) for path in config.teachers]
    student = CaptionModel(config.model, seed=config.seed)
    t_cfg = teachers[0].config.fusion
    for t in teachers[1:]:
        if t.config.fusion != t_cfg:
            raise UsageError("all teachers must share one architecture")
    assignment = config.teacher_assignment or tuple(
        b % len(teachers) for b in range(config.model.n_branches)
    )
    plan = KDPlan(
        student_layers=config.model.fusion.layers,
        teacher_layers=t_cfg.layers,
        adapter=random_adapter(config.model.fusion.hidden, t_cfg.hidden,
                               seed=config.seed + 17),
        stage=config.kd_stage,
        tau=config.tau,
        layer_map=_default_layer_map(config.model.fusion.layers, t_cfg.layers),
        teacher_assignment=assignment,
        kd1=config.kd1,
        kd2=config.kd2,
        task_weight=config.task_weight,
        phase_split=config.kd_phase_split,
    )
    opt = AdamW(student.parameters() + [plan.adapter], lr=config.lr,
                beta1=config.beta1, beta2=config.beta2,
                weight_decay=config.weight_decay)
    logs = []
    for step in range(config.steps):
        indices = _batch_indices(step, config.batch_size, len(items))
        batch = _assemble(config, config.kd_stage, items, pool, step, indices)
        parts = stage_loss(student, teachers, batch, plan, step=step,
                           total_steps=config.steps)
        opt.zero_grad()
        T.backward(parts.total)
        opt.step()
        student.step += 1
        if step % config.log_every == 0 or step == config.steps - 1:
            logs.append(
                {
                    "step": step,
                    "loss": parts.total.item(),
                    "task": parts.task,
                    "trunk_kd": parts.trunk_kd,
                    "prediction_kd": parts.prediction,
                    "stage": f"distill-{config.kd_stage}",
                }
            )
            log.info("step %d distill loss %.6f", step, parts.total.item())
    _write_outputs(config, student, logs)
    return student, logs


def _default_layer_map(student_layers: int, teacher_layers: int) -> tuple[int, ...]:
    """m(j) = 3j when it fits the teacher, else an even spread ending at the top."""
    if 3 * student_layers <= teacher_layers:
        return tuple(3 * j for j in range(1, student_layers + 1))
    step = teacher_layers / student_layers
    return tuple(int(round(step * j)) for j in range(1, student_layers + 1))


def _check_vocab(config: RunConfig, vocab) -> None:
    if vocab.size != config.model.fusion.vocab_size:
        raise UsageError(
            f"vocab file has {vocab.size} tokens but the model config says "
            f"{config.model.fusion.vocab_size}"
        )
    sp = config.model.specials
    actual = (vocab.pad_id, vocab.cls_id, vocab.sep_id, vocab.mask_id, vocab.unk_id)
    if actual != (sp.pad, sp.cls, sp.sep, sp.mask, sp.unk):
        raise UsageError(
            f"special token ids in the vocab {actual} differ from the config "
            f"({sp.pad}, {sp.cls}, {sp.sep}, {sp.mask}, {sp.unk})"
        )


def evaluate_files(pred_path, refs_path=None) -> dict:
    """Score predictions; either one merged eval file or split pred/refs."""
    if refs_path is None:
        corpus = load_eval_file(pred_path)
    else:
        from .metrics import make_corpus

        preds = {}
        with open(pred_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    preds[obj["id"]] = obj.get("candidate", obj.get("caption"))
        records = []
        with open(refs_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    if obj["id"] not in preds:
                        raise UsageError(f"no prediction for image {obj['id']!r}")
                    records.append(
                        {
                            "id": obj["id"],
                            "candidate": preds[obj["id"]],
                            "references": obj["references"],
                        }
                    )
        corpus = make_corpus(records)
    return {
        "bleu4": bleu4(corpus),
        "cider": cider(corpus),
        "images": len(corpus),
    }


def validation_caption_loss(model: CaptionModel, items) -> float:
    """Mean fine-tune caption loss over held-out items, no sampling."""
    batch = [assemble_finetune_item(it, model.config) for it in items]
    return finetune_loss(model, batch).item()
