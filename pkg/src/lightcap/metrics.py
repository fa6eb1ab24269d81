"""Caption quality metrics that need no external resources.

BLEU@4: corpus-level modified n-gram precision (n = 1..4, clipped by the
maximum reference count), geometric mean, closest-reference-length brevity
penalty, no smoothing (any zero precision gives 0).

CIDEr (the "-D" variant used in the COCO evaluation): per n-gram order,
TF-IDF vectors with idf = log(corpus size / document frequency); clipped
cosine similarity against each reference; a Gaussian penalty with sigma 6
on the length difference; mean over n, mean over references, times 10,
mean over images.

Metric tokenization matters for absolute values, so it is fixed here:
lowercase, every non-alphanumeric character becomes a space, split on
whitespace.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass

from .errors import FormatError, UsageError

_PUNCT = re.compile(r"[^a-z0-9\s]")


def tokenize_caption(text: str) -> list[str]:
    return _PUNCT.sub(" ", text.lower()).split()


@dataclass
class EvalEntry:
    image_id: str
    candidate: list[str]
    references: list[list[str]]

    def __post_init__(self):
        if not self.references:
            raise UsageError(f"image {self.image_id} has no references")


def make_corpus(records: list[dict]) -> list[EvalEntry]:
    """records: [{"id", "candidate": str, "references": [str, ...]}, ...]"""
    return [
        EvalEntry(
            image_id=r["id"],
            candidate=tokenize_caption(r["candidate"]),
            references=[tokenize_caption(ref) for ref in r["references"]],
        )
        for r in records
    ]


def load_eval_file(path) -> list[EvalEntry]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                records.append(
                    {"id": obj["id"], "candidate": obj["candidate"],
                     "references": obj["references"]}
                )
            except (KeyError, json.JSONDecodeError) as exc:
                raise FormatError(f"bad eval record on line {line_no}: {exc}") from exc
    return make_corpus(records)


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(corpus: list[EvalEntry]) -> float:
    """Corpus-level BLEU@4 in [0, 1]."""
    if not corpus:
        raise UsageError("empty evaluation corpus")
    matched = [0] * 4
    total = [0] * 4
    cand_len = 0
    ref_len = 0
    for entry in sorted(corpus, key=lambda e: e.image_id):
        c = len(entry.candidate)
        cand_len += c
        # closest reference length; ties resolve to the shorter one
        ref_len += min((abs(len(r) - c), len(r)) for r in entry.references)[1]
        for n in range(1, 5):
            cand_counts = _ngrams(entry.candidate, n)
            max_ref = Counter()
            for ref in entry.references:
                for gram, count in _ngrams(ref, n).items():
                    max_ref[gram] = max(max_ref[gram], count)
            total[n - 1] += sum(cand_counts.values())
            matched[n - 1] += sum(
                min(count, max_ref[gram]) for gram, count in cand_counts.items()
            )
    if any(t == 0 for t in total) or any(m == 0 for m in matched):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matched, total)) / 4.0
    brevity = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / max(cand_len, 1))
    return brevity * math.exp(log_precision)


@dataclass
class IdfTable:
    """Externally supplied document frequencies for single-image scoring."""

    doc_count: int
    frequencies: dict[tuple, float]


def _tfidf_vector(counts: Counter, doc_freq: dict, log_docs: float, n_orders: int):
    vecs = [dict() for _ in range(n_orders)]
    norms = [0.0] * n_orders
    length = 0
    for gram, term_freq in counts.items():
        order = len(gram) - 1
        idf = log_docs - math.log(max(1.0, doc_freq.get(gram, 0.0)))
        weight = term_freq * idf
        vecs[order][gram] = weight
        norms[order] += weight * weight
        if order == 0:
            length += term_freq
    return vecs, [math.sqrt(v) for v in norms], length


def cider(corpus: list[EvalEntry], idf: IdfTable | None = None,
          sigma: float = 6.0, n_orders: int = 4) -> float:
    """CIDEr-D on the x10 scale; needs >= 2 images unless an IDF table is given."""
    if not corpus:
        raise UsageError("empty evaluation corpus")
    entries = sorted(corpus, key=lambda e: e.image_id)
    if idf is None:
        if len(entries) < 2:
            raise UsageError(
                "corpus-level IDF needs >= 2 images; pass an IdfTable for "
                "single-image scoring"
            )
        doc_freq: dict[tuple, float] = {}
        for entry in entries:
            seen = set()
            for ref in entry.references:
                for n in range(1, n_orders + 1):
                    seen.update(_ngrams(ref, n).keys())
            for gram in seen:
                doc_freq[gram] = doc_freq.get(gram, 0.0) + 1.0
        log_docs = math.log(float(len(entries)))
    else:
        doc_freq = idf.frequencies
        log_docs = math.log(float(idf.doc_count))

    scores = []
    for entry in entries:
        all_counts = Counter()
        for n in range(1, n_orders + 1):
            all_counts.update(_ngrams(entry.candidate, n))
        vec_c, norm_c, len_c = _tfidf_vector(all_counts, doc_freq, log_docs, n_orders)
        per_ref = []
        for ref in entry.references:
            ref_counts = Counter()
            for n in range(1, n_orders + 1):
                ref_counts.update(_ngrams(ref, n))
            vec_r, norm_r, len_r = _tfidf_vector(ref_counts, doc_freq, log_docs, n_orders)
            delta = float(len_c - len_r)
            penalty = math.exp(-(delta * delta) / (2.0 * sigma * sigma))
            sims = []
            for order in range(n_orders):
                # clipped cosine: candidate weights clipped at the reference's
                dot = sum(
                    min(w, vec_r[order].get(gram, 0.0)) * vec_r[order].get(gram, 0.0)
                    for gram, w in sorted(vec_c[order].items())
                )
                if norm_c[order] > 0 and norm_r[order] > 0:
                    sims.append(penalty * dot / (norm_c[order] * norm_r[order]))
                else:
                    sims.append(0.0)
            per_ref.append(sum(sims) / n_orders)
        scores.append(10.0 * sum(per_ref) / len(entry.references))
    return sum(scores) / len(scores)
