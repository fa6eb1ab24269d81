"""Training objectives for both stages.

Pre-training: captions get 15% of their word tokens replaced by [MASK]
(full replacement, at least one slot forced), the concept set is swapped
for a different one from the corpus with probability 50%, and the loss is
the masked-token NLL plus the binary pollution cross entropy, equally
weighted.

Fine-tuning: the pollution machinery is off and every caption position is
a prediction slot. The caption block is laid out twice: once with the true
tokens (visible as causal context) and once as [MASK] slots sharing the
true tokens' position indices. Slot t attends to the context block, the
true tokens before t, and itself, which is exactly what the incremental
decoder sees at generation time.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import RangeError, UsageError
from .fusion import build_seq2seq_mask, make_positions, make_segments
from .model import AssembledItem, CaptionModel, ItemForward, forward_item
from .tensor import Tensor
from .tokenizer import SEG_CAPTION


def mask_caption(caption_ids, rate: float, rng: np.random.Generator,
                 mask_id: int, force_one: bool = True):
    """Independently mask each caption token with probability ``rate``.

    Masked slots become ``mask_id`` outright. If nothing got sampled and
    ``force_one`` is set, one position is drawn so the item still carries
    gradient. Returns (masked ids, slot positions, original targets).
    """
    ids = np.asarray(caption_ids, dtype=np.int64)
    if not 0.0 < rate < 1.0:
        raise UsageError(f"mask rate must be in (0, 1), got {rate}")
    if ids.size == 0:
        raise UsageError("cannot mask an empty caption")
    hits = rng.random(ids.size) < rate
    if force_one and not hits.any():
        hits[int(rng.integers(ids.size))] = True
    masked = ids.copy()
    masked[hits] = mask_id
    slots = np.flatnonzero(hits)
    return masked, slots, ids[slots]


def pollute_concepts(concept_ids, pool: list[np.ndarray], p: float,
                     rng: np.random.Generator):
    """With probability ``p`` swap the whole concept set for a different one.

    Returns (c_star, y) with y = 1 for a clean triple and y = 0 for a
    polluted one. The replacement is drawn uniformly from the pool entries
    that differ from the input set.
    """
    ids = np.asarray(concept_ids, dtype=np.int64)
    candidates = [np.asarray(s, dtype=np.int64) for s in pool]
    different = [s for s in candidates if not np.array_equal(s, ids)]
    if not different:
        raise UsageError("concept pool needs at least 2 distinct sets")
    if rng.random() < p:
        return different[int(rng.integers(len(different)))], 0
    return ids, 1


def caption_loss(rows: Tensor, targets) -> Tensor:
    """Mean over slots of -log softmax(row)[target].

    ``rows`` may be raw logits or already-fused log-probabilities; the
    internal log-softmax is idempotent on normalized inputs.
    """
    idx = np.asarray(targets, dtype=np.int64)
    if idx.size == 0:
        return Tensor(np.asarray(0.0))
    vocab = rows.shape[-1]
    if idx.min() < 0 or idx.max() >= vocab:
        raise RangeError(f"target id outside vocabulary of {vocab}")
    log_probs = T.log_softmax_lastdim(rows)
    onehot = np.zeros(rows.shape)
    onehot[np.arange(idx.size), idx] = 1.0
    picked = T.sum_axis(T.mul(log_probs, Tensor(onehot)), axis=-1)
    return T.neg(T.mean_all(picked))


def concept_loss(logit: Tensor, y: int) -> Tensor:
    """Binary cross entropy with logits, computed in the stable softplus form."""
    if y not in (0, 1):
        raise UsageError(f"pollution label must be 0 or 1, got {y}")
    # softplus(l) - y*l == -[y log s(l) + (1-y) log(1-s(l))]
    return T.sub(T.softplus(logit), T.mul(logit, Tensor(float(y))))


# ---------------------------------------------------------------------------
# batch assembly
# ---------------------------------------------------------------------------


def assemble_pretrain_item(
    item,
    model_cfg,
    rng: np.random.Generator,
    pool: list[np.ndarray],
    mask_rate: float = 0.15,
    pollution_prob: float = 0.5,
    force_one_mask: bool = True,
) -> AssembledItem:
    """Caption block [CLS] x~ [SEP] plus sampled pollution."""
    sp = model_cfg.specials
    masked, rel_slots, targets = _mask_or_empty(
        item.caption_ids, mask_rate, rng, sp.mask, force_one=force_one_mask
    )
    c_star, y = pollute_concepts(item.concept_ids, pool, pollution_prob, rng)
    n_vis = item.grid.height * item.grid.width
    n_con = len(c_star)
    block = np.concatenate([[sp.cls], masked, [sp.sep]]).astype(np.int64)
    n_cap = len(block)
    caption_start = n_vis + n_con
    return AssembledItem(
        item_id=item.item_id,
        grid=item.grid,
        clean_concept_ids=np.asarray(item.concept_ids, dtype=np.int64),
        concept_ids=c_star,
        caption_block_ids=block,
        segments=make_segments(n_vis, n_con, n_cap),
        positions=make_positions(n_vis, n_con, n_cap),
        mask=build_seq2seq_mask(n_vis, n_con, n_cap),
        slot_indices=caption_start + 1 + rel_slots,  # +1 skips [CLS]
        slot_targets=targets,
        cls_index=caption_start,
        pollution_label=y,
    )


def _mask_or_empty(caption_ids, rate, rng, mask_id, force_one=True):
    """Like ``mask_caption`` but tolerates empty captions (test hook)."""
    ids = np.asarray(caption_ids, dtype=np.int64)
    if ids.size == 0:
        return ids, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return mask_caption(ids, rate, rng, mask_id, force_one=force_one)


def assemble_finetune_item(item, model_cfg) -> AssembledItem:
    """Duplicated caption layout: true tokens then one [MASK] slot per target.

    Slot i shares position index with target i and may attend to the
    context, the true tokens before i, and itself. Targets are the caption
    tokens shifted by one plus the closing [SEP].
    """
    sp = model_cfg.specials
    x = np.asarray(item.caption_ids, dtype=np.int64)
    if x.size == 0:
        raise UsageError(f"item {item.item_id}: empty caption")
    n = x.size
    n_vis = item.grid.height * item.grid.width
    n_con = len(item.concept_ids)
    ctx = n_vis + n_con
    n_slots = n + 1
    block = np.concatenate([x, np.full(n_slots, sp.mask)]).astype(np.int64)
    total = ctx + n + n_slots

    mask = np.zeros((total, total), dtype=bool)
    mask[:ctx, :ctx] = True
    for j in range(n):  # true-token rows: causal over the true block
        row = ctx + j
        mask[row, :ctx] = True
        mask[row, ctx : row + 1] = True
    for i in range(n_slots):  # slot rows: context + true < i + self
        row = ctx + n + i
        mask[row, :ctx] = True
        mask[row, ctx : ctx + i] = True
        mask[row, row] = True

    positions = np.concatenate(
        [
            np.arange(ctx, dtype=np.int64),
            ctx + np.arange(n, dtype=np.int64),
            ctx + np.arange(n_slots, dtype=np.int64),
        ]
    )
    segments = np.concatenate(
        [make_segments(n_vis, n_con, 0), np.full(n + n_slots, SEG_CAPTION, dtype=np.int64)]
    )
    targets = np.concatenate([x, [sp.sep]]).astype(np.int64)
    return AssembledItem(
        item_id=item.item_id,
        grid=item.grid,
        clean_concept_ids=np.asarray(item.concept_ids, dtype=np.int64),
        concept_ids=np.asarray(item.concept_ids, dtype=np.int64),
        caption_block_ids=block,
        segments=segments,
        positions=positions,
        mask=mask,
        slot_indices=ctx + n + np.arange(n_slots, dtype=np.int64),
        slot_targets=targets,
        cls_index=None,
        pollution_label=None,
    )


# ---------------------------------------------------------------------------
# stage losses
# ---------------------------------------------------------------------------


def batch_caption_loss(forwards: list[ItemForward], batch: list[AssembledItem]) -> Tensor:
    rows = [f.fused_logprobs for f in forwards if f.fused_logprobs.shape[0] > 0]
    targets = np.concatenate([b.slot_targets for b in batch]) if batch else np.zeros(0)
    if not rows or targets.size == 0:
        return Tensor(np.asarray(0.0))
    return caption_loss(T.concat(rows, axis=0), targets)


def batch_concept_loss(forwards: list[ItemForward], batch: list[AssembledItem]) -> Tensor:
    terms = [
        concept_loss(f.pollution, b.pollution_label)
        for f, b in zip(forwards, batch)
        if f.pollution is not None and b.pollution_label is not None
    ]
    if not terms:
        return Tensor(np.asarray(0.0))
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return T.div(acc, Tensor(float(len(terms))))


def pretrain_loss(model: CaptionModel, batch: list[AssembledItem],
                  forwards: list[ItemForward] | None = None) -> Tensor:
    """Masked-caption NLL plus pollution BCE, equally weighted."""
    if not batch:
        raise UsageError("empty batch")
    forwards = forwards or [forward_item(model, item) for item in batch]
    return T.add(batch_caption_loss(forwards, batch), batch_concept_loss(forwards, batch))


def finetune_loss(model: CaptionModel, batch: list[AssembledItem],
                  forwards: list[ItemForward] | None = None) -> Tensor:
    """Caption NLL only; no pollution sampling happens in this stage."""
    if not batch:
        raise UsageError("empty batch")
    forwards = forwards or [forward_item(model, item) for item in batch]
    return batch_caption_loss(forwards, batch)
