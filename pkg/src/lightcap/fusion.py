"""Multi-modal fusion transformer with a seq2seq attention mask.

A small post-norm BERT-style encoder (student default: 4 layers, hidden
312, 12 heads) consumes projected visual tokens, concept tokens, and
caption tokens. The context block (visual + concept) attends
bidirectionally within itself and never to caption positions; each caption
position attends to the full context plus earlier caption positions and
itself. Each forward records the per-layer masked attention scores and
hidden states so a teacher's trace can be matched layer by layer.

Masking is additive: blocked scores get MASK_ADDITIVE (-1e9), which
underflows to an exactly zero attention weight after softmax. That keeps
causality bitwise exact while leaving the recorded score tensors finite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, UsageError
from .tensor import MASK_ADDITIVE, Tensor
from .tokenizer import SEG_CAPTION, SEG_CONCEPT, SEG_VISUAL
from .vision import GridFeature


@dataclass(frozen=True)
class FusionConfig:
    layers: int = 4
    hidden: int = 312
    heads: int = 12
    ffn: int = 1200
    max_positions: int = 512
    vocab_size: int = 30522
    grid_channels: int = 2048
    segments: int = 3

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ConfigError(
                f"hidden {self.hidden} not divisible by heads {self.heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


TEACHER_CONFIG = FusionConfig(layers=12, hidden=768, heads=12, ffn=3072)


@dataclass
class FusionInputs:
    """Assembled model input: projected visual tokens plus token ids.

    ``visual`` is the [n_visual x d] block after projection; token ids cover
    the concept and caption blocks. Segments and positions span the full
    sequence (visual first). ``cls_index``, when set, marks the caption
    block's [CLS] position used by the pollution classifier.
    """

    visual: Tensor
    token_ids: np.ndarray
    segments: np.ndarray
    positions: np.ndarray
    cls_index: int | None = None

    def __post_init__(self):
        total = self.visual.shape[0] + len(self.token_ids)
        if len(self.segments) != total or len(self.positions) != total:
            raise DimensionError(
                f"segments/positions length {len(self.segments)}/"
                f"{len(self.positions)} != sequence length {total}"
            )

    @property
    def length(self) -> int:
        return self.visual.shape[0] + len(self.token_ids)


def build_seq2seq_mask(n_visual: int, n_concept: int, n_caption: int) -> np.ndarray:
    """Boolean [T x T] mask; True means row i may attend to column j."""
    if n_visual < 0 or n_concept < 0 or n_caption < 0:
        raise UsageError("mask block sizes must be >= 0")
    ctx = n_visual + n_concept
    if ctx < 1:
        raise UsageError("need at least one context position")
    total = ctx + n_caption
    mask = np.zeros((total, total), dtype=bool)
    mask[:ctx, :ctx] = True
    for t in range(n_caption):
        row = ctx + t
        mask[row, :ctx] = True
        mask[row, ctx : row + 1] = True
    return mask


def mask_to_additive(mask: np.ndarray, dtype=np.float64) -> np.ndarray:
    if not mask.diagonal().all():
        raise UsageError("every position must attend to itself")
    add = np.zeros(mask.shape, dtype=dtype)
    add[~mask] = MASK_ADDITIVE
    return add


@dataclass
class ForwardTrace:
    """Per-layer masked attention scores [h x T x T] and hiddens [T x d]."""

    attentions: list[Tensor] = field(default_factory=list)
    hiddens: list[Tensor] = field(default_factory=list)
    cls_hidden: Tensor | None = None

    @property
    def final_hidden(self) -> Tensor:
        return self.hiddens[-1]


class FusionParams:
    """All trainable tensors of the fusion trunk."""

    def __init__(self, config: FusionConfig, seed: int = 0, init_scale: float = 0.02):
        self.config = config
        rng = np.random.default_rng(seed)
        d, ffn = config.hidden, config.ffn

        def normal(*shape):
            return rng.normal(0.0, init_scale, size=shape)

        self.word_emb = Tensor(normal(config.vocab_size, d), requires_grad=True,
                               name="fusion.word_emb")
        self.pos_emb = Tensor(normal(config.max_positions, d), requires_grad=True,
                              name="fusion.pos_emb")
        self.seg_emb = Tensor(normal(config.segments, d), requires_grad=True,
                              name="fusion.seg_emb")
        self.emb_ln_gain = Tensor(np.ones(d), requires_grad=True, name="fusion.emb_ln_gain")
        self.emb_ln_bias = Tensor(np.zeros(d), requires_grad=True, name="fusion.emb_ln_bias")
        self.visual_proj = Tensor(normal(config.grid_channels, d), requires_grad=True,
                                  name="fusion.visual_proj")
        self.visual_bias = Tensor(np.zeros(d), requires_grad=True, name="fusion.visual_bias")
        self.pollution_w = Tensor(normal(d), requires_grad=True, name="fusion.pollution_w")
        self.pollution_b = Tensor(np.zeros(()), requires_grad=True, name="fusion.pollution_b")
        self.layers = []
        for i in range(config.layers):
            prefix = f"fusion.layer{i}"
            layer = {
                "wq": Tensor(normal(d, d), requires_grad=True, name=f"{prefix}.wq"),
                "bq": Tensor(np.zeros(d), requires_grad=True, name=f"{prefix}.bq"),
                "wk": Tensor(normal(d, d), requires_grad=True, name=f"{prefix}.wk"),
                "bk": Tensor(np.zeros(d), requires_grad=True, name=f"{prefix}.bk"),
                "wv": Tensor(normal(d, d), requires_grad=True, name=f"{prefix}.wv"),
                "bv": Tensor(np.zeros(d), requires_grad=True, name=f"{prefix}.bv"),
                "wo": Tensor(normal(d, d), requires_grad=True, name=f"{prefix}.wo"),
                "bo": Tensor(np.zeros(d), requires_grad=True, name=f"{prefix}.bo"),
                "ln1_gain": Tensor(np.ones(d), requires_grad=True, name=f"{prefix}.ln1_gain"),
                "ln1_bias": Tensor(np.zeros(d), requires_grad=True, name=f"{prefix}.ln1_bias"),
                "w_ff1": Tensor(normal(d, ffn), requires_grad=True, name=f"{prefix}.w_ff1"),
                "b_ff1": Tensor(np.zeros(ffn), requires_grad=True, name=f"{prefix}.b_ff1"),
                "w_ff2": Tensor(normal(ffn, d), requires_grad=True, name=f"{prefix}.w_ff2"),
                "b_ff2": Tensor(np.zeros(d), requires_grad=True, name=f"{prefix}.b_ff2"),
                "ln2_gain": Tensor(np.ones(d), requires_grad=True, name=f"{prefix}.ln2_gain"),
                "ln2_bias": Tensor(np.zeros(d), requires_grad=True, name=f"{prefix}.ln2_bias"),
            }
            self.layers.append(layer)

    def named(self):
        yield "fusion.word_emb", self.word_emb
        yield "fusion.pos_emb", self.pos_emb
        yield "fusion.seg_emb", self.seg_emb
        yield "fusion.emb_ln_gain", self.emb_ln_gain
        yield "fusion.emb_ln_bias", self.emb_ln_bias
        yield "fusion.visual_proj", self.visual_proj
        yield "fusion.visual_bias", self.visual_bias
        yield "fusion.pollution_w", self.pollution_w
        yield "fusion.pollution_b", self.pollution_b
        for i, layer in enumerate(self.layers):
            for key, tensor in layer.items():
                yield f"fusion.layer{i}.{key}", tensor


def project_visual(modulated: GridFeature, params: FusionParams) -> Tensor:
    """Flatten the grid row-major to [H*W x C] and apply the 1x1 linear."""
    h, w, c = modulated.values.shape
    if c != params.config.grid_channels:
        raise DimensionError(
            f"grid channels {c} != configured {params.config.grid_channels}"
        )
    flat = T.reshape(modulated.values, (h * w, c))
    return T.linear(flat, params.visual_proj, params.visual_bias)


def forward(inputs: FusionInputs, mask: np.ndarray, params: FusionParams) -> ForwardTrace:
    """Run the trunk; returns the trace with all layers recorded."""
    cfg = params.config
    total = inputs.length
    if mask.shape != (total, total):
        raise DimensionError(f"mask shape {mask.shape} != sequence length {total}")
    if total > cfg.max_positions:
        raise DimensionError(
            f"sequence length {total} exceeds max positions {cfg.max_positions}"
        )

    tok = T.gather_rows(params.word_emb, inputs.token_ids)
    x = T.concat([inputs.visual, tok], axis=0)
    x = T.add(x, T.gather_rows(params.pos_emb, inputs.positions))
    x = T.add(x, T.gather_rows(params.seg_emb, inputs.segments))
    x = T.layer_norm(x, params.emb_ln_gain, params.emb_ln_bias)

    additive = Tensor(mask_to_additive(mask))
    scale = 1.0 / np.sqrt(cfg.head_dim)
    trace = ForwardTrace()
    for layer in params.layers:
        q = _split_heads(T.linear(x, layer["wq"], layer["bq"]), cfg)
        k = _split_heads(T.linear(x, layer["wk"], layer["bk"]), cfg)
        v = _split_heads(T.linear(x, layer["wv"], layer["bv"]), cfg)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), Tensor(scale))
        scores = T.add(scores, additive)
        trace.attentions.append(scores)
        probs = T.softmax_lastdim(scores)
        ctx = T.matmul(probs, v)  # [h, T, hd]
        merged = T.reshape(T.transpose(ctx, (1, 0, 2)), (total, cfg.hidden))
        attn_out = T.linear(merged, layer["wo"], layer["bo"])
        x = T.layer_norm(T.add(x, attn_out), layer["ln1_gain"], layer["ln1_bias"])
        ff = T.linear(T.gelu(T.linear(x, layer["w_ff1"], layer["b_ff1"])),
                      layer["w_ff2"], layer["b_ff2"])
        x = T.layer_norm(T.add(x, ff), layer["ln2_gain"], layer["ln2_bias"])
        trace.hiddens.append(x)
    if inputs.cls_index is not None:
        trace.cls_hidden = T.reshape(
            T.slice_rows(x, inputs.cls_index, inputs.cls_index + 1), (cfg.hidden,)
        )
    return trace


def _split_heads(x: Tensor, cfg: FusionConfig) -> Tensor:
    t = x.shape[0]
    return T.transpose(T.reshape(x, (t, cfg.heads, cfg.head_dim)), (1, 0, 2))


def pollution_logit(cls_hidden: Tensor, params: FusionParams) -> Tensor:
    """Raw binary-classifier logit from the [CLS] hidden state."""
    if cls_hidden.shape != (params.config.hidden,):
        raise DimensionError(
            f"cls hidden shape {cls_hidden.shape} != ({params.config.hidden},)"
        )
    return T.add(
        T.sum_all(T.mul(cls_hidden, params.pollution_w)), params.pollution_b
    )


def make_positions(n_visual: int, n_concept: int, n_caption: int) -> np.ndarray:
    """Visual tokens take 0..n_visual-1; the rest continue sequentially."""
    return np.arange(n_visual + n_concept + n_caption, dtype=np.int64)


def make_segments(n_visual: int, n_concept: int, n_caption: int) -> np.ndarray:
    return np.concatenate(
        [
            np.full(n_visual, SEG_VISUAL, dtype=np.int64),
            np.full(n_concept, SEG_CONCEPT, dtype=np.int64),
            np.full(n_caption, SEG_CAPTION, dtype=np.int64),
        ]
    )
