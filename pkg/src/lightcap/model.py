"""The full caption model: modulator -> projection -> fusion -> heads.

One word-embedding tensor is shared by three consumers: the fusion input
embedding, the modulator's token embedding, and the ensemble head's output
embedding. Sharing is by object identity, so gradients from every path
accumulate on a single parameter and checkpoints store the storage once.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .ensemble import EnsembleHead, all_branch_logits, fuse_logits
from .errors import ConfigError
from .fusion import (
    ForwardTrace,
    FusionConfig,
    FusionInputs,
    FusionParams,
    forward,
    pollution_logit,
    project_visual,
)
from .modulator import ModulatorParams, gate_from_concepts, modulate, neutral_gate
from .tensor import Tensor
from .tokenizer import TokenSequence, Vocab
from .vision import GridFeature


@dataclass(frozen=True)
class SpecialIds:
    pad: int
    cls: int
    sep: int
    mask: int
    unk: int

    @classmethod
    def from_vocab(cls, vocab: Vocab) -> "SpecialIds":
        return cls(vocab.pad_id, vocab.cls_id, vocab.sep_id, vocab.mask_id, vocab.unk_id)


@dataclass(frozen=True)
class ModelConfig:
    fusion: FusionConfig = field(default_factory=FusionConfig)
    n_branches: int = 3
    modulator_hidden: int = 39
    specials: SpecialIds = SpecialIds(pad=0, cls=101, sep=102, mask=103, unk=100)

    def __post_init__(self):
        ids = [self.specials.pad, self.specials.cls, self.specials.sep,
               self.specials.mask, self.specials.unk]
        if len(set(ids)) != 5 or max(ids) >= self.fusion.vocab_size:
            raise ConfigError(f"bad special token ids {ids} for vocab "
                              f"{self.fusion.vocab_size}")

    def scaled(self, **fusion_overrides) -> "ModelConfig":
        return replace(self, fusion=replace(self.fusion, **fusion_overrides))


def production_config() -> ModelConfig:
    """Production-scale dimensions (4 x 312 trunk over a 30522 vocab)."""
    return ModelConfig()


def desk_config(vocab_size: int = 200, specials: SpecialIds | None = None) -> ModelConfig:
    """Small dimensions for fast CPU experiments and tests."""
    return ModelConfig(
        fusion=FusionConfig(
            layers=2, hidden=32, heads=4, ffn=64, max_positions=128,
            vocab_size=vocab_size, grid_channels=8,
        ),
        n_branches=3,
        modulator_hidden=8,
        specials=specials or SpecialIds(pad=0, cls=1, sep=2, mask=3, unk=4),
    )


class CaptionModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.fusion = FusionParams(config.fusion, seed=seed)
        self.head = EnsembleHead(self.fusion.word_emb, config.n_branches, seed=seed + 1)
        self.modulator = ModulatorParams(
            self.fusion.word_emb,
            hidden=config.modulator_hidden,
            channels=config.fusion.grid_channels,
            seed=seed + 2,
        )
        self.step = 0

    def named_parameters(self):
        """(name, tensor) pairs; shared tensors appear under several names."""
        yield from self.fusion.named()
        yield from self.head.named()
        yield from self.modulator.named()

    def parameters(self) -> list[Tensor]:
        """Unique parameter objects (shared storages listed once)."""
        seen: set[int] = set()
        out: list[Tensor] = []
        for _, p in self.named_parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


@dataclass
class AssembledItem:
    """Everything one forward pass needs, fully sampled and frozen.

    ``concept_ids`` is the (possibly polluted) fusion input c*;
    ``clean_concept_ids`` is the retrieval output c that drives the channel
    gate. ``slot_indices`` are absolute sequence positions whose hidden
    states produce token predictions for ``slot_targets``.
    """

    item_id: str
    grid: GridFeature
    clean_concept_ids: np.ndarray
    concept_ids: np.ndarray
    caption_block_ids: np.ndarray
    segments: np.ndarray
    positions: np.ndarray
    mask: np.ndarray
    slot_indices: np.ndarray
    slot_targets: np.ndarray
    cls_index: int | None = None
    pollution_label: int | None = None


@dataclass
class ItemForward:
    trace: ForwardTrace
    slot_hiddens: Tensor  # [S, d]
    branch_logits: list[Tensor]  # per branch [S, V]
    fused_logprobs: Tensor  # [S, V]
    pollution: Tensor | None  # scalar logit


def encode_visual_tokens(model: CaptionModel, grid: GridFeature,
                         gate_concept_ids: np.ndarray) -> Tensor:
    """Channel-gate the grid from the clean concepts, then project."""
    if len(gate_concept_ids):
        gate = gate_from_concepts(gate_concept_ids, model.modulator)
    else:
        gate = neutral_gate(grid.channels)
    return project_visual(modulate(grid, gate), model.fusion)


def forward_item(model: CaptionModel, item: AssembledItem) -> ItemForward:
    visual = encode_visual_tokens(model, item.grid, item.clean_concept_ids)
    n_visual = visual.shape[0]
    # the token block as a validated sequence (ids, segments, positions)
    tokens = TokenSequence(
        ids=np.concatenate([item.concept_ids, item.caption_block_ids]).astype(np.int64).tolist(),
        segments=item.segments[n_visual:].tolist(),
        positions=item.positions[n_visual:].tolist(),
    )
    inputs = FusionInputs(
        visual=visual,
        token_ids=np.asarray(tokens.ids, dtype=np.int64),
        segments=item.segments,
        positions=item.positions,
        cls_index=item.cls_index,
    )
    trace = forward(inputs, item.mask, model.fusion)
    slot_hiddens = T.gather_rows(trace.final_hidden, item.slot_indices)
    branch_logits = all_branch_logits(slot_hiddens, model.head)
    fused = fuse_logits(branch_logits)
    pol = None
    if item.cls_index is not None:
        pol = pollution_logit(trace.cls_hidden, model.fusion)
    return ItemForward(
        trace=trace,
        slot_hiddens=slot_hiddens,
        branch_logits=branch_logits,
        fused_logprobs=fused,
        pollution=pol,
    )
