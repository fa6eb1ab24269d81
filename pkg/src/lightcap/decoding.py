"""Autoregressive caption generation by iterative [MASK] prediction.

Each step appends one [MASK] to the caption block, reads the fused
ensemble log-probabilities at that position, replaces the [MASK] with the
chosen token, and appends a fresh [MASK]. The incremental path caches
per-layer keys and values for the context and every finalized token, so a
step touches only the newly finalized token and the appended [MASK]
(whose keys and values are never cached, since the next step replaces it).

Generation runs on plain numpy (inference only, no graph); the uncached
path reuses the training-path forward as the reference implementation.
All functions here only read model parameters, so one model may serve
concurrent decodes; caches are extended functionally, never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StateError, UsageError
from .fusion import FusionInputs, build_seq2seq_mask, forward, make_positions, make_segments
from .model import CaptionModel, encode_visual_tokens
from .tensor import (
    Tensor,
    _gelu_np,
    _layer_norm_np,
    _log_softmax_lastdim_np,
    _softmax_lastdim_np,
)
from .tokenizer import SEG_CAPTION
from .vision import GridFeature


@dataclass
class DecodeContext:
    """Fixed conditioning for one image: projected visuals plus concepts."""

    visual_tokens: np.ndarray  # [n_visual x d], already modulated + projected
    concept_ids: np.ndarray

    @property
    def n_visual(self) -> int:
        return self.visual_tokens.shape[0]

    @property
    def n_concept(self) -> int:
        return len(self.concept_ids)

    @property
    def length(self) -> int:
        return self.n_visual + self.n_concept

    def fingerprint(self) -> tuple:
        return (
            self.n_visual,
            self.n_concept,
            float(self.visual_tokens.sum()),
            tuple(int(i) for i in self.concept_ids),
        )


def make_context(model: CaptionModel, grid: GridFeature, concept_ids) -> DecodeContext:
    ids = np.asarray(concept_ids, dtype=np.int64)
    visual = encode_visual_tokens(model, grid, ids)
    return DecodeContext(visual_tokens=visual.data, concept_ids=ids)


@dataclass
class DecodeCache:
    """Per-layer cached keys/values for all finalized positions."""

    keys: list[np.ndarray]  # per layer [h x length x head_dim]
    values: list[np.ndarray]
    length: int
    context_len: int
    context_tag: tuple = ()

    def extended(self, new_keys, new_values, n_rows: int) -> "DecodeCache":
        return DecodeCache(
            keys=[np.concatenate([k, nk[:, :n_rows]], axis=1)
                  for k, nk in zip(self.keys, new_keys)],
            values=[np.concatenate([v, nv[:, :n_rows]], axis=1)
                    for v, nv in zip(self.values, new_values)],
            length=self.length + n_rows,
            context_len=self.context_len,
            context_tag=self.context_tag,
        )


def _embed_rows(model: CaptionModel, token_ids, positions, segments) -> np.ndarray:
    fp = model.fusion
    x = fp.word_emb.data[np.asarray(token_ids, dtype=np.int64)]
    x = x + fp.pos_emb.data[np.asarray(positions, dtype=np.int64)]
    x = x + fp.seg_emb.data[np.asarray(segments, dtype=np.int64)]
    return _layer_norm_np(x, fp.emb_ln_gain.data, fp.emb_ln_bias.data, 1e-12)


def _embed_context(model: CaptionModel, context: DecodeContext) -> np.ndarray:
    fp = model.fusion
    n_vis, n_con = context.n_visual, context.n_concept
    tok = fp.word_emb.data[context.concept_ids] if n_con else np.zeros((0, context.visual_tokens.shape[1]))
    x = np.concatenate([context.visual_tokens, tok], axis=0)
    x = x + fp.pos_emb.data[make_positions(n_vis, n_con, 0)]
    x = x + fp.seg_emb.data[make_segments(n_vis, n_con, 0)]
    return _layer_norm_np(x, fp.emb_ln_gain.data, fp.emb_ln_bias.data, 1e-12)


def _incremental_forward(model: CaptionModel, rows: np.ndarray, cache: DecodeCache,
                         tri_mask: np.ndarray):
    """Push embedded rows through all layers against the cached keys/values.

    ``tri_mask`` is the [n_new x n_new] visibility among the new rows; all
    cached positions are visible to every new row. Returns the final hidden
    rows plus the per-layer new keys/values.
    """
    cfg = model.fusion.config
    h, dh = cfg.heads, cfg.head_dim
    n_new = rows.shape[0]
    scale = 1.0 / np.sqrt(dh)
    x = rows
    new_keys, new_values = [], []
    blocked = ~tri_mask
    for li, layer in enumerate(model.fusion.layers):
        q = (x @ layer["wq"].data + layer["bq"].data).reshape(n_new, h, dh).transpose(1, 0, 2)
        k = (x @ layer["wk"].data + layer["bk"].data).reshape(n_new, h, dh).transpose(1, 0, 2)
        v = (x @ layer["wv"].data + layer["bv"].data).reshape(n_new, h, dh).transpose(1, 0, 2)
        new_keys.append(k)
        new_values.append(v)
        k_all = np.concatenate([cache.keys[li], k], axis=1) if cache.length else k
        v_all = np.concatenate([cache.values[li], v], axis=1) if cache.length else v
        scores = q @ k_all.transpose(0, 2, 1) * scale  # [h, n_new, total]
        # mask within the new-row block only; cached positions are always visible
        scores[:, :, cache.length:][:, blocked] = -1e9
        probs = _softmax_lastdim_np(scores)
        ctx = (probs @ v_all).transpose(1, 0, 2).reshape(n_new, cfg.hidden)
        attn_out = ctx @ layer["wo"].data + layer["bo"].data
        x = _layer_norm_np(x + attn_out, layer["ln1_gain"].data, layer["ln1_bias"].data, 1e-12)
        ff = _gelu_np(x @ layer["w_ff1"].data + layer["b_ff1"].data)
        ff = ff @ layer["w_ff2"].data + layer["b_ff2"].data
        x = _layer_norm_np(x + ff, layer["ln2_gain"].data, layer["ln2_bias"].data, 1e-12)
    return x, new_keys, new_values


def _fused_logprobs_np(model: CaptionModel, hidden: np.ndarray) -> np.ndarray:
    acc = None
    for branch in model.head.branches:
        z = hidden @ branch["proj"].data + branch["proj_bias"].data
        z = _gelu_np(z)
        z = _layer_norm_np(z, branch["ln_gain"].data, branch["ln_bias"].data, 1e-12)
        logits = model.head.shared_embedding.data @ z + branch["out_bias"].data
        lp = _log_softmax_lastdim_np(logits)
        acc = lp if acc is None else acc + lp
    return acc / model.head.n_branches


def _empty_cache(model: CaptionModel, context: DecodeContext) -> DecodeCache:
    cfg = model.fusion.config
    return DecodeCache(
        keys=[np.zeros((cfg.heads, 0, cfg.head_dim)) for _ in model.fusion.layers],
        values=[np.zeros((cfg.heads, 0, cfg.head_dim)) for _ in model.fusion.layers],
        length=0,
        context_len=context.length,
        context_tag=context.fingerprint(),
    )


def _context_cache(model: CaptionModel, context: DecodeContext) -> DecodeCache:
    rows = _embed_context(model, context)
    cache = _empty_cache(model, context)
    n = rows.shape[0]
    tri = np.ones((n, n), dtype=bool)  # context is bidirectional within itself
    _, keys, values = _incremental_forward(model, rows, cache, tri)
    return cache.extended(keys, values, n)


def decode_step(model: CaptionModel, context: DecodeContext, generated,
                cache: DecodeCache | None = None, use_cache: bool = True):
    """Fused log-probs over the vocabulary at the appended [MASK] position.

    Returns (log_probs, cache). With ``use_cache`` the returned cache
    covers the context plus every finalized token (never the [MASK]).
    Without it the full training-path forward runs and the cache is None.
    """
    sp = model.config.specials
    ids = [int(t) for t in generated]
    if not use_cache:
        n_vis, n_con = context.n_visual, context.n_concept
        caption = np.asarray(ids + [sp.mask], dtype=np.int64)
        n_cap = len(caption)
        token_ids = np.concatenate([context.concept_ids, caption]).astype(np.int64)
        inputs = FusionInputs(
            visual=Tensor(context.visual_tokens),
            token_ids=token_ids,
            segments=make_segments(n_vis, n_con, n_cap),
            positions=make_positions(n_vis, n_con, n_cap),
        )
        trace = forward(inputs, build_seq2seq_mask(n_vis, n_con, n_cap), model.fusion)
        hidden = trace.final_hidden.data[-1]
        return _fused_logprobs_np(model, hidden), None

    if cache is None:
        cache = _context_cache(model, context)
    if cache.context_tag != context.fingerprint():
        raise StateError("decode cache was built for a different context")
    if cache.length < cache.context_len or cache.length > context.length + len(ids):
        raise StateError(
            f"cache covers {cache.length} positions but context+generated is "
            f"{context.length + len(ids)}"
        )
    pending = ids[cache.length - context.length:]
    new_tokens = pending + [sp.mask]
    start = cache.length  # absolute index of the first new row
    positions = np.arange(start, start + len(new_tokens))
    segments = np.full(len(new_tokens), SEG_CAPTION)
    rows = _embed_rows(model, new_tokens, positions, segments)
    tri = np.tril(np.ones((len(new_tokens), len(new_tokens)), dtype=bool))
    hidden, keys, values = _incremental_forward(model, rows, cache, tri)
    cache = cache.extended(keys, values, len(pending))
    return _fused_logprobs_np(model, hidden[-1]), cache


def greedy_decode(model: CaptionModel, context: DecodeContext, max_len: int = 20,
                  use_cache: bool = True) -> list[int]:
    """Argmax decoding; stops at [SEP] or ``max_len`` words."""
    sp = model.config.specials
    ids: list[int] = []
    cache = None
    while len(ids) < max_len:
        log_probs, cache = decode_step(model, context, ids, cache, use_cache=use_cache)
        nxt = int(np.argmax(log_probs))
        if nxt == sp.sep:
            break
        ids.append(nxt)
    return ids


@dataclass(order=True)
class _Hyp:
    sort_key: tuple = field(compare=True)
    ids: tuple = field(compare=False, default=())
    logp: float = field(compare=False, default=0.0)
    finished: bool = field(compare=False, default=False)
    cache: DecodeCache | None = field(compare=False, default=None)


def _length_penalty(n: int, alpha: float) -> float:
    if alpha == 0.0:
        return 1.0
    return ((5.0 + n) / 6.0) ** alpha


def beam_search(model: CaptionModel, context: DecodeContext, beam_size: int = 5,
                max_len: int = 20, use_cache: bool = True,
                length_alpha: float = 0.0) -> list[int]:
    """Standard beam search over fused log-probs.

    Each live beam expands by its ``beam_size`` best tokens; the global
    best ``beam_size`` hypotheses (finished ones included) survive.
    Emitting [SEP] finishes a beam, with the [SEP] log-prob counted but the
    token excluded from the ids. Returns the best finished beam, or the
    best unfinished one if nothing finished; ties break toward the earlier
    finisher and then lexicographically smaller ids. ``length_alpha``
    enables the ((5+n)/6)^alpha length normalization (off by default).
    """
    if beam_size < 1:
        raise UsageError(f"beam size must be >= 1, got {beam_size}")
    sp = model.config.specials
    beams = [_Hyp(sort_key=(), ids=(), logp=0.0, finished=False, cache=None)]
    for _ in range(max_len + 1):  # +1: a final step may still emit [SEP]
        live = [b for b in beams if not b.finished]
        if not live:
            break
        candidates = [b for b in beams if b.finished]
        for beam in live:
            if len(beam.ids) >= max_len:
                candidates.append(beam)
                continue
            log_probs, cache = decode_step(model, context, list(beam.ids),
                                           beam.cache, use_cache=use_cache)
            top = np.argsort(-log_probs, kind="stable")[:beam_size]
            for tok in top:
                tok = int(tok)
                score = beam.logp + float(log_probs[tok])
                if tok == sp.sep:
                    candidates.append(_Hyp(sort_key=(), ids=beam.ids, logp=score,
                                           finished=True, cache=None))
                else:
                    candidates.append(_Hyp(sort_key=(), ids=beam.ids + (tok,),
                                           logp=score, finished=False, cache=cache))
        for c in candidates:
            c.sort_key = (
                -c.logp / _length_penalty(len(c.ids), length_alpha),
                len(c.ids),
                c.ids,
            )
        candidates.sort()
        beams = candidates[:beam_size]
        if all(b.finished or len(b.ids) >= max_len for b in beams):
            break
    finished = [b for b in beams if b.finished]
    pool = finished if finished else beams
    best = min(
        pool,
        key=lambda b: (-b.logp / _length_penalty(len(b.ids), length_alpha),
                       len(b.ids), b.ids),
    )
    return list(best.ids)
