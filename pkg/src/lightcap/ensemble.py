"""Parallel prediction branches over one shared output embedding.

Each branch applies its own d x d projection (GELU + layer norm, BERT
LM-head shape) before the dot product with the shared word-embedding
matrix; only the projection and the output bias are per-branch, so the
vocabulary-sized weight exists once. Branch log-softmaxes are averaged
for collaborative prediction (a geometric mean over probabilities).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import RangeError, UsageError
from .tensor import Tensor


class EnsembleHead:
    """``shared_embedding`` must be the same object as the input word
    embedding; it is referenced, never copied."""

    def __init__(self, shared_embedding: Tensor, n_branches: int = 3, seed: int = 0,
                 init_scale: float = 0.02):
        if n_branches < 1:
            raise UsageError(f"need >= 1 branch, got {n_branches}")
        rng = np.random.default_rng(seed)
        self.shared_embedding = shared_embedding
        vocab, d = shared_embedding.shape
        self.branches = []
        for b in range(n_branches):
            prefix = f"head.branch{b}"
            self.branches.append(
                {
                    "proj": Tensor(rng.normal(0, init_scale, (d, d)),
                                   requires_grad=True, name=f"{prefix}.proj"),
                    "proj_bias": Tensor(np.zeros(d), requires_grad=True,
                                        name=f"{prefix}.proj_bias"),
                    "ln_gain": Tensor(np.ones(d), requires_grad=True,
                                      name=f"{prefix}.ln_gain"),
                    "ln_bias": Tensor(np.zeros(d), requires_grad=True,
                                      name=f"{prefix}.ln_bias"),
                    "out_bias": Tensor(np.zeros(vocab), requires_grad=True,
                                       name=f"{prefix}.out_bias"),
                }
            )

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    def named(self):
        yield "head.shared_embedding", self.shared_embedding
        for b, branch in enumerate(self.branches):
            for key, tensor in branch.items():
                yield f"head.branch{b}.{key}", tensor


def branch_forward(hidden: Tensor, head: EnsembleHead, branch: int) -> Tensor:
    """Vocabulary logits from one branch; ``hidden`` is [d] or [n x d]."""
    if branch < 0 or branch >= head.n_branches:
        raise RangeError(f"branch {branch} out of range ({head.n_branches} branches)")
    p = head.branches[branch]
    single = hidden.ndim == 1
    if single:
        hidden = T.reshape(hidden, (1, hidden.shape[0]))
    h = T.gelu(T.linear(hidden, p["proj"], p["proj_bias"]))
    h = T.layer_norm(h, p["ln_gain"], p["ln_bias"])
    logits = T.add(
        T.matmul(h, T.transpose(head.shared_embedding, (1, 0))), p["out_bias"]
    )
    return T.reshape(logits, (logits.shape[1],)) if single else logits


def all_branch_logits(hidden: Tensor, head: EnsembleHead) -> list[Tensor]:
    return [branch_forward(hidden, head, b) for b in range(head.n_branches)]


def fuse_logits(branch_logits: list[Tensor]) -> Tensor:
    """Mean over branches of log-softmax(branch logits).

    The result is a log sub-distribution: exp sums to <= 1, with equality
    when all branches agree. Argmax ties resolve to the lowest index by
    numpy convention.
    """
    if not branch_logits:
        raise UsageError("fuse_logits needs at least one branch")
    logs = [T.log_softmax_lastdim(z) for z in branch_logits]
    if len(logs) == 1:
        return logs[0]
    acc = logs[0]
    for z in logs[1:]:
        acc = T.add(acc, z)
    return T.mul(acc, Tensor(1.0 / len(logs)))
