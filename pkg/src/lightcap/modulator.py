"""Concept-conditioned channel gating of the visual feature map.

Concept tokens pass through the shared word embedding, two fully connected
layers with a ReLU between, and a sigmoid; the per-token weights are then
averaged into one gate in (0, 1) per channel, which multiplies the grid
channel-wise. Averaging after the sigmoid keeps the gate itself inside
(0, 1). With no concepts available the neutral all-ones gate applies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, UsageError
from .tensor import Tensor
from .vision import GridFeature


class ModulatorParams:
    """FC stack 312 x 39 and 39 x 2048 at production scale.

    ``embedding`` is the fusion model's word embedding, shared by
    reference; mutating one mutates the other.
    """

    def __init__(self, embedding: Tensor, hidden: int = 39, channels: int = 2048,
                 seed: int = 0, init_scale: float = 0.02):
        rng = np.random.default_rng(seed)
        d = embedding.shape[1]
        self.embedding = embedding
        self.fc1_w = Tensor(rng.normal(0, init_scale, (d, hidden)),
                            requires_grad=True, name="modulator.fc1_w")
        self.fc1_b = Tensor(np.zeros(hidden), requires_grad=True, name="modulator.fc1_b")
        self.fc2_w = Tensor(rng.normal(0, init_scale, (hidden, channels)),
                            requires_grad=True, name="modulator.fc2_w")
        self.fc2_b = Tensor(np.zeros(channels), requires_grad=True, name="modulator.fc2_b")

    @property
    def channels(self) -> int:
        return self.fc2_w.shape[1]

    def named(self):
        # the embedding is owned (and therefore serialized) by the fusion trunk
        yield "modulator.fc1_w", self.fc1_w
        yield "modulator.fc1_b", self.fc1_b
        yield "modulator.fc2_w", self.fc2_w
        yield "modulator.fc2_b", self.fc2_b


@dataclass
class ChannelGate:
    weights: Tensor  # [channels], every entry in (0, 1) (or exactly 1 for the neutral gate)


def gate_from_concepts(concept_token_ids, params: ModulatorParams) -> ChannelGate:
    """Mean over tokens of sigmoid(FC2(relu(FC1(embed(id)))))."""
    ids = np.asarray(concept_token_ids, dtype=np.int64)
    if ids.size == 0:
        raise UsageError("gate_from_concepts requires at least one concept token")
    emb = T.gather_rows(params.embedding, ids)
    h = T.relu(T.linear(emb, params.fc1_w, params.fc1_b))
    w = T.sigmoid(T.linear(h, params.fc2_w, params.fc2_b))
    return ChannelGate(weights=T.mean_axis(w, axis=0))


def neutral_gate(channels: int) -> ChannelGate:
    """All-ones gate: the identity element of channel-wise multiplication."""
    return ChannelGate(weights=Tensor(np.ones(channels)))


def modulate(grid: GridFeature, gate: ChannelGate) -> GridFeature:
    """out[h][w][c] = gate[c] * grid[h][w][c]."""
    if gate.weights.shape != (grid.channels,):
        raise DimensionError(
            f"gate length {gate.weights.shape} != grid channels {grid.channels}"
        )
    return GridFeature(values=T.mul(grid.values, gate.weights))
