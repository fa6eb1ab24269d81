"""Static parameter/FLOPs accounting plus a wall-clock latency harness.

Every op kind in a declarative layer spec has one parameter rule and one
FLOPs rule. The FLOPs convention throughout is one multiply-accumulate =
2 FLOPs, stated in every report header so numbers are never compared
across silently different conventions.

External backbones (the image encoder and the region detector) are not
implemented live; their shapes ship as declarative spec files and are
accounted the same way.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from importlib import resources

from .errors import ConfigError, UsageError

FLOPS_CONVENTION = "1 MAC = 2 FLOPs"


@dataclass
class LayerSpec:
    name: str
    ops: list[dict] = field(default_factory=list)

    def add(self, kind: str, name: str, **dims) -> "LayerSpec":
        self.ops.append({"kind": kind, "name": name, **dims})
        return self

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "ops": self.ops}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "LayerSpec":
        obj = json.loads(text)
        return cls(name=obj["name"], ops=list(obj["ops"]))


def _op_params(op: dict) -> int:
    kind = op["kind"]
    if kind == "linear":
        if op.get("shared", False):  # weight counted under its owning stage
            return op["d_out"] if op.get("bias", True) else 0
        return op["d_in"] * op["d_out"] + (op["d_out"] if op.get("bias", True) else 0)
    if kind == "conv":
        k = op["kernel"]
        return k * k * op["c_in"] * op["c_out"] + (
            op["c_out"] if op.get("bias", True) else 0
        )
    if kind == "embedding":
        return op["rows"] * op["dim"]
    if kind == "layernorm":
        return 2 * op["dim"]
    if kind == "batchnorm":
        return 2 * op["channels"]
    if kind == "vector":
        return op["size"]
    if kind == "scalar":
        return 1
    if kind == "attention":
        return 0  # projections are separate linear entries
    raise ConfigError(f"unknown op kind {kind!r} in layer spec")


def _op_flops(op: dict) -> int:
    kind = op["kind"]
    positions = op.get("positions", 1)
    if kind == "linear":
        return 2 * op["d_in"] * op["d_out"] * positions
    if kind == "conv":
        k = op["kernel"]
        return 2 * k * k * op["c_in"] * op["c_out"] * op["h_out"] * op["w_out"]
    if kind == "embedding":
        return 0  # table lookup
    if kind == "layernorm":
        return 8 * op["dim"] * positions
    if kind == "batchnorm":
        return 0  # folded into the preceding conv at inference
    if kind in ("vector", "scalar"):
        return 0
    if kind == "attention":
        # scores QK^T and the context product, over all key positions
        seq = op["seq"]
        keys = op.get("key_positions", seq)
        return 2 * seq * keys * op["dim"] + 2 * seq * keys * op["dim"]
    raise ConfigError(f"unknown op kind {kind!r} in layer spec")


def count_params(spec_or_model) -> int:
    """Exact parameter count (biases included) of a spec or a live model."""
    if isinstance(spec_or_model, LayerSpec):
        return sum(_op_params(op) for op in spec_or_model.ops)
    if hasattr(spec_or_model, "parameters"):
        return sum(p.size for p in spec_or_model.parameters())
    raise UsageError(f"cannot count parameters of {type(spec_or_model)!r}")


def count_flops(spec: LayerSpec) -> int:
    return sum(_op_flops(op) for op in spec.ops)


# ---------------------------------------------------------------------------
# spec generators for the live model
# ---------------------------------------------------------------------------


def modulator_spec(model, n_concept_tokens: int = 20) -> LayerSpec:
    """The two FC blocks only; the token embedding is shared with (and
    counted under) the fusion trunk."""
    m = model.modulator
    d, hidden = m.fc1_w.shape
    channels = m.fc2_w.shape[1]
    spec = LayerSpec(name="modulator")
    spec.add("linear", "fc1", d_in=d, d_out=hidden, bias=True, positions=n_concept_tokens)
    spec.add("linear", "fc2", d_in=hidden, d_out=channels, bias=True,
             positions=n_concept_tokens)
    return spec


def fusion_spec(model, seq_len: int) -> LayerSpec:
    """Trunk including embeddings, the visual projection, and the pollution
    classifier; the ensemble head is separate."""
    cfg = model.config.fusion
    spec = LayerSpec(name="fusion")
    spec.add("embedding", "word_embedding", rows=cfg.vocab_size, dim=cfg.hidden)
    spec.add("embedding", "position_embedding", rows=cfg.max_positions, dim=cfg.hidden)
    spec.add("embedding", "segment_embedding", rows=cfg.segments, dim=cfg.hidden)
    spec.add("layernorm", "embedding_ln", dim=cfg.hidden, positions=seq_len)
    n_visual = 49
    spec.add("linear", "visual_projection", d_in=cfg.grid_channels, d_out=cfg.hidden,
             bias=True, positions=n_visual)
    for i in range(cfg.layers):
        p = f"layer{i}"
        for name in ("q", "k", "v", "out"):
            spec.add("linear", f"{p}.attn_{name}", d_in=cfg.hidden, d_out=cfg.hidden,
                     bias=True, positions=seq_len)
        spec.add("attention", f"{p}.attention", dim=cfg.hidden, heads=cfg.heads,
                 seq=seq_len)
        spec.add("layernorm", f"{p}.ln1", dim=cfg.hidden, positions=seq_len)
        spec.add("linear", f"{p}.ffn_in", d_in=cfg.hidden, d_out=cfg.ffn, bias=True,
                 positions=seq_len)
        spec.add("linear", f"{p}.ffn_out", d_in=cfg.ffn, d_out=cfg.hidden, bias=True,
                 positions=seq_len)
        spec.add("layernorm", f"{p}.ln2", dim=cfg.hidden, positions=seq_len)
    spec.add("linear", "pollution_classifier", d_in=cfg.hidden, d_out=1, bias=True)
    return spec


def ensemble_head_spec(model, slots: int = 1) -> LayerSpec:
    """Per-branch parameters only; the output embedding is the shared word
    embedding already counted in the fusion spec."""
    cfg = model.config.fusion
    spec = LayerSpec(name="ensemble_head")
    for b in range(model.head.n_branches):
        spec.add("linear", f"branch{b}.proj", d_in=cfg.hidden, d_out=cfg.hidden,
                 bias=True, positions=slots)
        spec.add("layernorm", f"branch{b}.ln", dim=cfg.hidden, positions=slots)
        # the output weight is the shared word embedding, counted in fusion
        spec.add("linear", f"branch{b}.output", d_in=cfg.hidden, d_out=cfg.vocab_size,
                 bias=False, shared=True, positions=slots)
        spec.add("vector", f"branch{b}.out_bias", size=cfg.vocab_size)
    return spec


def model_spec(model, seq_len: int) -> LayerSpec:
    """One spec covering every live tensor exactly once."""
    spec = LayerSpec(name="caption_model")
    for part in (fusion_spec(model, seq_len), ensemble_head_spec(model),
                 modulator_spec(model)):
        for op in part.ops:
            spec.add(op["kind"], f"{part.name}.{op['name']}",
                     **{k: v for k, v in op.items() if k not in ("kind", "name")})
    return spec


def alignment_spec(in_dim: int = 2048, hidden: int = 1024, out_dim: int = 1024,
                   regions: int = 20) -> LayerSpec:
    spec = LayerSpec(name="concept_alignment")
    spec.add("linear", "fc1", d_in=in_dim, d_out=hidden, bias=True, positions=regions)
    spec.add("linear", "fc2", d_in=hidden, d_out=out_dim, bias=True, positions=regions)
    spec.add("scalar", "temperature")
    return spec


def load_reference_spec(name: str) -> LayerSpec:
    """Shipped declarative stand-ins: "resnet50_backbone" or "detector"."""
    text = resources.files("lightcap.specs").joinpath(f"{name}.json").read_text()
    return LayerSpec.from_json(text)


# ---------------------------------------------------------------------------
# budget report
# ---------------------------------------------------------------------------


@dataclass
class StageBudget:
    name: str
    params: int
    flops: int
    bytes_per_param: int

    @property
    def storage_bytes(self) -> int:
        return self.params * self.bytes_per_param


@dataclass
class BudgetReport:
    stages: list[StageBudget]
    assumptions: dict

    @property
    def total_params(self) -> int:
        return sum(s.params for s in self.stages)

    @property
    def total_flops(self) -> int:
        return sum(s.flops for s in self.stages)

    @property
    def total_storage_bytes(self) -> int:
        return sum(s.storage_bytes for s in self.stages)

    def to_dict(self) -> dict:
        return {
            "flops_convention": FLOPS_CONVENTION,
            "assumptions": self.assumptions,
            "stages": [
                {
                    "name": s.name,
                    "params": s.params,
                    "storage_bytes": s.storage_bytes,
                    "flops": s.flops,
                }
                for s in self.stages
            ],
            "totals": {
                "params": self.total_params,
                "storage_bytes": self.total_storage_bytes,
                "flops": self.total_flops,
            },
        }

    def render(self) -> str:
        lines = [f"budget report ({FLOPS_CONVENTION})"]
        for key, value in self.assumptions.items():
            lines.append(f"  assumption: {key} = {value}")
        header = f"{'stage':<22}{'params (M)':>12}{'size (MB)':>12}{'FLOPs (G)':>12}"
        lines.append(header)
        lines.append("-" * len(header))
        for s in self.stages + [None]:
            if s is None:
                lines.append(
                    f"{'total':<22}{self.total_params / 1e6:>12.3f}"
                    f"{self.total_storage_bytes / 1e6:>12.1f}"
                    f"{self.total_flops / 1e9:>12.3f}"
                )
            else:
                lines.append(
                    f"{s.name:<22}{s.params / 1e6:>12.3f}"
                    f"{s.storage_bytes / 1e6:>12.1f}{s.flops / 1e9:>12.3f}"
                )
        return "\n".join(lines)


def build_budget_report(model, seq_len: int = 90, decode_steps: int = 12,
                        include_backbones: bool = True,
                        encoder_bytes_per_param: int = 2) -> BudgetReport:
    stages = []
    if include_backbones:
        enc = load_reference_spec("resnet50_backbone")
        det = load_reference_spec("detector")
        stages.append(StageBudget("image_encoder", count_params(enc), count_flops(enc),
                                  encoder_bytes_per_param))
        stages.append(StageBudget("detector", count_params(det), count_flops(det), 4))
        align = alignment_spec()
        stages.append(StageBudget("concept_alignment", count_params(align),
                                  count_flops(align), 4))
    mod = modulator_spec(model)
    stages.append(StageBudget("modulator", count_params(mod), count_flops(mod), 4))
    fus = fusion_spec(model, seq_len)
    decode_flops = _decode_flops(model, seq_len, decode_steps)
    stages.append(StageBudget("fusion", count_params(fus),
                              count_flops(fus) + decode_flops, 4))
    head = ensemble_head_spec(model, slots=decode_steps)
    stages.append(StageBudget("ensemble_head", count_params(head), count_flops(head), 4))
    return BudgetReport(
        stages=stages,
        assumptions={
            "sequence_length": seq_len,
            "decode_steps": decode_steps,
            "encoder_bytes_per_param": encoder_bytes_per_param,
        },
    )


def _decode_flops(model, context_len: int, decode_steps: int) -> int:
    """Incremental decoding: each step pushes 2 rows against a growing cache."""
    cfg = model.config.fusion
    total = 0
    for step in range(decode_steps):
        keys = context_len + step + 2
        step_spec = LayerSpec(name="decode_step")
        for i in range(cfg.layers):
            for name in ("q", "k", "v", "out"):
                step_spec.add("linear", f"l{i}.{name}", d_in=cfg.hidden,
                              d_out=cfg.hidden, bias=True, positions=2)
            step_spec.add("attention", f"l{i}.attn", dim=cfg.hidden, heads=cfg.heads,
                          seq=2, key_positions=keys)
            step_spec.add("linear", f"l{i}.ffn_in", d_in=cfg.hidden, d_out=cfg.ffn,
                          bias=True, positions=2)
            step_spec.add("linear", f"l{i}.ffn_out", d_in=cfg.ffn, d_out=cfg.hidden,
                          bias=True, positions=2)
        total += count_flops(step_spec)
    return total


# ---------------------------------------------------------------------------
# latency harness
# ---------------------------------------------------------------------------


@dataclass
class StageTiming:
    name: str
    median_ms: float
    repeats: int


def benchmark_latency(stages: list[tuple[str, callable]], repeats: int = 5,
                      warmup: int = 1) -> list[StageTiming]:
    """Median wall time per named stage; monotonic clock, warmup not timed."""
    if warmup < 1:
        raise UsageError("need at least one warmup run")
    out = []
    for name, fn in stages:
        for _ in range(warmup):
            fn()
        samples = []
        for _ in range(repeats):
            start = time.perf_counter()
            fn()
            samples.append((time.perf_counter() - start) * 1000.0)
        samples.sort()
        mid = len(samples) // 2
        median = samples[mid] if len(samples) % 2 else 0.5 * (
            samples[mid - 1] + samples[mid]
        )
        out.append(StageTiming(name=name, median_ms=median, repeats=repeats))
    return out
