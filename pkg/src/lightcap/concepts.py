"""Region-to-concept retrieval over a fixed vocabulary of text embeddings.

A two-linear-block alignment head maps pooled region vectors into the
concept embedding space; labels are assigned by cosine similarity against
the unit-normalized vocabulary rows. The alignment head is trained with a
symmetric InfoNCE loss while the backbone features stay frozen (they only
ever enter as constants).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, UsageError
from .tensor import Tensor
from .tensorfile import load_tensor, save_tensor
from .vision import GridFeature, Region, pool_region_vector


@dataclass
class ConceptVocabulary:
    """Concept names plus unit-norm text embeddings, one row per name."""

    names: list[str]
    embeddings: np.ndarray  # [N, D_text]

    def __post_init__(self):
        if len(self.names) < 1:
            raise UsageError("concept vocabulary must be non-empty")
        if self.embeddings.shape[0] != len(self.names):
            raise DimensionError(
                f"{len(self.names)} names but {self.embeddings.shape[0]} embedding rows"
            )
        norms = np.linalg.norm(self.embeddings, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise UsageError("concept embeddings must be unit L2 norm per row")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self) -> int:
        return len(self.names)


def load_concept_vocabulary(names_path, embeddings_path) -> ConceptVocabulary:
    with open(names_path, encoding="utf-8") as fh:
        names = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
    emb = load_tensor(embeddings_path).astype(np.float64)
    return ConceptVocabulary(names=names, embeddings=emb)


def save_concept_vocabulary(names_path, embeddings_path, vocab: ConceptVocabulary) -> None:
    with open(names_path, "w", encoding="utf-8") as fh:
        for name in vocab.names:
            fh.write(name + "\n")
    save_tensor(embeddings_path, vocab.embeddings.astype(np.float32))


class AlignmentMLP:
    """Two linear blocks with ReLU between, then L2 normalization.

    Default sizes map 2048-channel region vectors into the 1024-d concept
    space. A learnable temperature scales the contrastive logits.
    """

    def __init__(self, in_dim: int = 2048, hidden: int = 1024, out_dim: int = 1024,
                 seed: int = 0, temperature: float = 0.07):
        rng = np.random.default_rng(seed)
        self.w1 = Tensor(rng.normal(0, 1 / np.sqrt(in_dim), (in_dim, hidden)),
                         requires_grad=True, name="align.w1")
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True, name="align.b1")
        self.w2 = Tensor(rng.normal(0, 1 / np.sqrt(hidden), (hidden, out_dim)),
                         requires_grad=True, name="align.w2")
        self.b2 = Tensor(np.zeros(out_dim), requires_grad=True, name="align.b2")
        self.temperature = Tensor(np.asarray(float(temperature)),
                                  requires_grad=True, name="align.temperature")

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2, self.temperature]


def _l2_normalize_rows(x: Tensor) -> Tensor:
    """Unit rows; the all-zero row maps to itself instead of NaN."""
    sq = T.sum_axis(T.mul(x, x), axis=-1, keepdims=True)
    # max(norm, tiny) keeps the zero row finite without disturbing others
    norm = T.pow_const(T.add(sq, Tensor(1e-30)), 0.5)
    return T.div(x, norm)


def embed_region(roi_vec, mlp: AlignmentMLP) -> Tensor:
    """Project one pooled region vector and L2-normalize it."""
    vec = roi_vec if isinstance(roi_vec, Tensor) else Tensor(np.asarray(roi_vec, dtype=np.float64))
    if vec.shape[-1] != mlp.w1.shape[0]:
        raise DimensionError(
            f"region vector dim {vec.shape[-1]} != alignment input {mlp.w1.shape[0]}"
        )
    single = vec.ndim == 1
    if single:
        vec = T.reshape(vec, (1, vec.shape[0]))
    h = T.relu(T.linear(vec, mlp.w1, mlp.b1))
    out = _l2_normalize_rows(T.linear(h, mlp.w2, mlp.b2))
    return T.reshape(out, (out.shape[1],)) if single else out


def assign_label(region_emb, vocab: ConceptVocabulary) -> tuple[str, float]:
    """Best concept by dot product; ties break to the lowest vocab index."""
    emb = region_emb.data if isinstance(region_emb, Tensor) else np.asarray(region_emb)
    scores = vocab.embeddings @ emb
    best = int(np.argmax(scores))
    return vocab.names[best], float(scores[best])


@dataclass
class ConceptSet:
    """Deduplicated (name, score) pairs, scores non-increasing, <= K items."""

    items: list[tuple[str, float]]

    def __post_init__(self):
        names = [n for n, _ in self.items]
        if len(names) != len(set(names)):
            raise UsageError("duplicate names in concept set")
        scores = [s for _, s in self.items]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise UsageError("concept scores must be non-increasing")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.items]

    def __len__(self) -> int:
        return len(self.items)


def retrieve_concepts(
    grid: GridFeature,
    regions: list[Region],
    mlp: AlignmentMLP,
    vocab: ConceptVocabulary,
    k: int,
) -> ConceptSet:
    """Pool, embed, and label each region; dedupe by max score; top-K.

    Ties in the final ordering break by vocabulary index so retrieval is
    fully deterministic.
    """
    if k < 1:
        raise UsageError(f"K must be >= 1, got {k}")
    best: dict[str, float] = {}
    order: dict[str, int] = {n: i for i, n in enumerate(vocab.names)}
    for region in regions:
        vec = pool_region_vector(grid, region)
        emb = embed_region(vec, mlp)
        name, score = assign_label(emb, vocab)
        if name not in best or score > best[name]:
            best[name] = score
    ranked = sorted(best.items(), key=lambda kv: (-kv[1], order[kv[0]]))
    return ConceptSet(items=ranked[:k])


def contrastive_loss(region_embs: Tensor, text_embs: Tensor, temperature: Tensor) -> Tensor:
    """Symmetric InfoNCE over in-batch negatives with diagonal targets."""
    if region_embs.shape != text_embs.shape:
        raise DimensionError(
            f"embedding shapes differ: {region_embs.shape} vs {text_embs.shape}"
        )
    n = region_embs.shape[0]
    if n < 2:
        raise UsageError("contrastive loss needs a batch of >= 2 pairs")
    logits = T.div(T.matmul(region_embs, T.transpose(text_embs, (1, 0))), temperature)
    log_p_rows = T.log_softmax_lastdim(logits)
    log_p_cols = T.log_softmax_lastdim(T.transpose(logits, (1, 0)))
    eye = Tensor(np.eye(n))
    row_term = T.neg(T.div(T.sum_all(T.mul(eye, log_p_rows)), Tensor(float(n))))
    col_term = T.neg(T.div(T.sum_all(T.mul(eye, log_p_cols)), Tensor(float(n))))
    return T.mul(T.add(row_term, col_term), Tensor(0.5))


def train_alignment(
    pairs: list[tuple[np.ndarray, np.ndarray]],
    mlp: AlignmentMLP,
    epochs: int = 60,
    lr: float = 1e-5,
) -> list[float]:
    """Full-batch gradient descent on the contrastive loss.

    Only the two linear blocks and the temperature move; region vectors and
    text embeddings are frozen inputs. Returns the per-epoch loss history.
    """
    if not pairs:
        raise UsageError("empty alignment training set")
    rois = Tensor(np.stack([np.asarray(r, dtype=np.float64) for r, _ in pairs]))
    texts = Tensor(np.stack([np.asarray(t, dtype=np.float64) for _, t in pairs]))
    params = mlp.parameters()
    history: list[float] = []
    for _ in range(epochs):
        for p in params:
            p.zero_grad()
        emb = embed_region(rois, mlp)
        loss = contrastive_loss(emb, texts, mlp.temperature)
        T.backward(loss)
        for p in params:
            if p.grad is not None:
                p.data = p.data - lr * p.grad
        history.append(loss.item())
    return history
