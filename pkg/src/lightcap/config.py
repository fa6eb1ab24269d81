"""Run configuration: model dimensions plus training knobs, JSON in and out.

Defaults mirror the production recipe: mask rate 0.15, pollution 0.5,
distillation temperature 1, top-20 concepts, 3 head branches, beam 5,
captions capped at 20 words, AdamW with betas (0.9, 0.999) and weight
decay 1e-2. Two presets ship: "desk" (hidden 32, 2 layers, small vocab)
for CPU-scale experiments, and "production" (hidden 312, 4 layers, vocab
30522), the full-size budget that the profiler tests pin exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .fusion import FusionConfig
from .model import ModelConfig, SpecialIds, desk_config, production_config


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=desk_config)
    # sampling
    mask_rate: float = 0.15
    pollution_prob: float = 0.5
    top_k_concepts: int = 20
    # distillation
    tau: float = 1.0
    kd1: float = 1.0
    kd2: float = 1.0
    task_weight: float = 1.0
    kd_stage: str = "finetune"
    kd_phase_split: float | None = 0.5
    teacher_assignment: tuple[int, ...] | None = None
    # decoding
    beam_size: int = 5
    max_len: int = 20
    length_alpha: float = 0.0
    # optimizer
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    # loop
    batch_size: int = 8
    steps: int = 100
    log_every: int = 10
    seed: int = 0
    # paths
    dataset: str | None = None
    vocab: str | None = None
    checkpoint_out: str | None = None
    log_out: str | None = None
    teachers: tuple[str, ...] = ()

    def __post_init__(self):
        if not (0.0 < self.mask_rate < 1.0):
            raise ConfigError(f"mask_rate must be in (0,1), got {self.mask_rate}")
        if not (0.0 <= self.pollution_prob <= 1.0):
            raise ConfigError(f"pollution_prob outside [0,1]: {self.pollution_prob}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.kd_stage not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown kd_stage {self.kd_stage!r}")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["teachers"] = list(self.teachers)
        if self.teacher_assignment is not None:
            out["teacher_assignment"] = list(self.teacher_assignment)
        return out

    def dump(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def model_config_from_dict(obj: dict) -> ModelConfig:
    fusion = FusionConfig(**obj["fusion"])
    specials = SpecialIds(**obj["specials"])
    return ModelConfig(
        fusion=fusion,
        n_branches=obj.get("n_branches", 3),
        modulator_hidden=obj.get("modulator_hidden", 39),
        specials=specials,
    )


def run_config_from_dict(obj: dict) -> RunConfig:
    obj = dict(obj)
    if "preset" in obj:
        preset = obj.pop("preset")
        if preset == "production":
            obj.setdefault("model", dataclasses.asdict(production_config()))
        elif preset == "desk":
            obj.setdefault("model", dataclasses.asdict(desk_config()))
        else:
            raise ConfigError(f"unknown preset {preset!r}")
    model = obj.pop("model", None)
    kwargs = {}
    valid = {f.name for f in dataclasses.fields(RunConfig)}
    for key, value in obj.items():
        if key not in valid:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[key] = value
    if "teachers" in kwargs:
        kwargs["teachers"] = tuple(kwargs["teachers"])
    if kwargs.get("teacher_assignment") is not None:
        kwargs["teacher_assignment"] = tuple(kwargs["teacher_assignment"])
    cfg = RunConfig(**kwargs)
    if model is not None:
        cfg = dataclasses.replace(cfg, model=model_config_from_dict(model))
    return cfg


def load_run_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return run_config_from_dict(json.load(fh))


def save_run_config(path, config: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config.dump() + "\n")


def model_digest(config: ModelConfig) -> str:
    """Stable digest of the shape-determining fields; stored in checkpoints."""
    payload = json.dumps(dataclasses.asdict(config), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
