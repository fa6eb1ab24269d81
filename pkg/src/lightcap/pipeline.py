"""End-to-end captioning: features -> concepts -> modulate -> fuse -> decode.

Also hosts the latency report whose shape mirrors the per-stage budget
table: feature loading/encoding, concept extraction, context encoding,
and a per-decode-step figure that the total multiplies by the caption
length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .concepts import AlignmentMLP, ConceptVocabulary, retrieve_concepts
from .decoding import DecodeContext, beam_search, decode_step, greedy_decode, make_context
from .model import CaptionModel
from .profiler import benchmark_latency
from .tokenizer import Vocab, encode, decode as decode_ids
from .vision import GridFeature, Region, uniform_proposals


@dataclass
class CaptionResult:
    caption: str
    token_ids: list[int]
    concepts: list[tuple[str, float]]
    stage_ms: dict[str, float]


def concepts_for_image(
    grid: GridFeature,
    regions: list[Region] | None,
    mlp: AlignmentMLP | None,
    concept_vocab: ConceptVocabulary | None,
    k: int,
) -> list[tuple[str, float]]:
    """Retrieve concepts when the machinery is available, else none."""
    if mlp is None or concept_vocab is None:
        return []
    if not regions:
        regions = uniform_proposals(3)
    return retrieve_concepts(grid, regions, mlp, concept_vocab, k).items


def caption_image(
    model: CaptionModel,
    vocab: Vocab,
    grid: GridFeature,
    regions: list[Region] | None = None,
    concept_names: list[str] | None = None,
    alignment: AlignmentMLP | None = None,
    concept_vocab: ConceptVocabulary | None = None,
    top_k: int = 20,
    beam_size: int = 5,
    max_len: int = 20,
    length_alpha: float = 0.0,
    timings: bool = False,
) -> CaptionResult:
    """Caption one image; concepts come from the extractor or are given."""
    import time

    stage_ms: dict[str, float] = {}
    t0 = time.perf_counter()
    if concept_names is None:
        scored = concepts_for_image(grid, regions, alignment, concept_vocab, top_k)
    else:
        scored = [(name, 1.0) for name in concept_names[:top_k]]
    stage_ms["concept_extraction"] = (time.perf_counter() - t0) * 1000.0

    t0 = time.perf_counter()
    concept_ids = np.asarray(
        [i for name, _ in scored for i in encode(name, vocab)], dtype=np.int64
    )
    context = make_context(model, grid, concept_ids)
    stage_ms["context_encoding"] = (time.perf_counter() - t0) * 1000.0

    t0 = time.perf_counter()
    if beam_size == 1:
        ids = greedy_decode(model, context, max_len=max_len)
    else:
        ids = beam_search(model, context, beam_size=beam_size, max_len=max_len,
                          length_alpha=length_alpha)
    stage_ms["decoding"] = (time.perf_counter() - t0) * 1000.0

    return CaptionResult(
        caption=decode_ids(ids, vocab),
        token_ids=ids,
        concepts=list(scored),
        stage_ms=stage_ms if timings else {},
    )


@dataclass
class LatencyReport:
    stage_ms: dict[str, float]
    per_decode_step_ms: float
    caption_length: int
    repeats: int

    @property
    def total_ms(self) -> float:
        return sum(self.stage_ms.values()) + self.per_decode_step_ms * self.caption_length

    def to_dict(self) -> dict:
        return {
            "stages_ms": dict(self.stage_ms),
            "per_decode_step_ms": self.per_decode_step_ms,
            "caption_length": self.caption_length,
            "decode_total_ms": self.per_decode_step_ms * self.caption_length,
            "total_ms": self.total_ms,
            "repeats": self.repeats,
        }

    def render(self) -> str:
        lines = [f"latency report (medians over {self.repeats} repeats)"]
        for name, ms in self.stage_ms.items():
            lines.append(f"  {name:<22}{ms:>10.2f} ms")
        lines.append(
            f"  {'decoding':<22}{self.per_decode_step_ms:>10.2f} ms x "
            f"{self.caption_length} (caption length)"
        )
        lines.append(f"  {'total':<22}{self.total_ms:>10.2f} ms")
        return "\n".join(lines)


def caption_latency_report(
    model: CaptionModel,
    vocab: Vocab,
    load_features,
    concept_names: list[str],
    caption_length: int = 12,
    repeats: int = 5,
    warmup: int = 1,
) -> LatencyReport:
    """Median per-stage latency for one image, decode cost per step.

    ``load_features`` is a zero-argument callable producing the grid (file
    read or toy encoder), timed as the feature stage.
    """
    grid = load_features()
    concept_ids = np.asarray(
        [i for name in concept_names for i in encode(name, vocab)], dtype=np.int64
    )
    context_holder: dict[str, DecodeContext] = {}

    def feature_stage():
        load_features()

    def concept_stage():
        encode(" ".join(concept_names), vocab)

    def context_stage():
        context_holder["ctx"] = make_context(model, grid, concept_ids)

    stage_times = benchmark_latency(
        [
            ("feature_load_or_encode", feature_stage),
            ("concept_extraction", concept_stage),
            ("context_encoding", context_stage),
        ],
        repeats=repeats,
        warmup=warmup,
    )
    context = context_holder["ctx"]

    # steady-state decode step: one finalized token + the appended mask
    generated = [model.config.specials.unk] * 2
    _, warm_cache = decode_step(model, context, generated[:1], None)

    def step_stage():
        decode_step(model, context, generated, warm_cache)

    step_time = benchmark_latency([("decode_step", step_stage)], repeats=repeats,
                                  warmup=warmup)[0]
    return LatencyReport(
        stage_ms={t.name: t.median_ms for t in stage_times},
        per_decode_step_ms=step_time.median_ms,
        caption_length=caption_length,
        repeats=repeats,
    )
