"""Dataset ingestion and synthetic corpus generation.

Datasets are JSON lines, one object per image:

    {"id": str, "caption": str, "feature_file": path,
     "concepts": [str] (optional), "regions": [[x1,y1,x2,y2]] (optional)}

Features are loaded from the referenced binary tensor files. When a record
has no concepts, the caller may retrieve them with the concept extractor
or leave them empty (the channel gate then stays neutral).

The synthetic builder writes a complete miniature corpus (vocab, feature
files, dataset JSONL) so training commands and tests run hermetically.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .tokenizer import SPECIAL_TOKENS, Vocab, encode, load_vocab, write_vocab
from .vision import GridFeature, Region, load_grid_features, save_grid_features
from .tensor import Tensor


@dataclass
class Item:
    item_id: str
    grid: GridFeature
    concept_ids: np.ndarray
    caption_ids: np.ndarray
    caption_text: str
    concepts: list[str]
    regions: list[Region]


def load_dataset(path, vocab: Vocab, max_caption_len: int = 20) -> list[Item]:
    base = os.path.dirname(os.path.abspath(path))
    items: list[Item] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                item_id = obj["id"]
                caption = obj["caption"]
                feature_file = obj["feature_file"]
            except (KeyError, json.JSONDecodeError) as exc:
                raise FormatError(f"bad dataset record on line {line_no}: {exc}") from exc
            if not os.path.isabs(feature_file):
                feature_file = os.path.join(base, feature_file)
            grid = load_grid_features(feature_file)
            concepts = list(obj.get("concepts", []))
            concept_ids = np.asarray(
                [i for name in concepts for i in encode(name, vocab)], dtype=np.int64
            )
            caption_ids = np.asarray(encode(caption, vocab)[:max_caption_len], dtype=np.int64)
            regions = [Region(*box) for box in obj.get("regions", [])]
            items.append(
                Item(
                    item_id=item_id,
                    grid=grid,
                    concept_ids=concept_ids,
                    caption_ids=caption_ids,
                    caption_text=caption,
                    concepts=concepts,
                    regions=regions,
                )
            )
    if not items:
        raise FormatError(f"dataset {path} contains no items")
    return items


def concept_pool(items: list[Item]) -> list[np.ndarray]:
    return [item.concept_ids for item in items]


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

_WORDS = [
    "red", "blue", "green", "small", "large", "shiny", "round", "striped",
    "dog", "cat", "bird", "car", "boat", "tree", "house", "chair",
    "sits", "runs", "flies", "floats", "stands", "sleeps", "jumps", "waits",
    "near", "under", "beside", "over", "inside", "behind", "park", "river",
    "field", "city", "garden", "window", "a", "the", "on", "in",
]


def synthetic_vocab_tokens(total: int = 200) -> list[str]:
    """Specials + word list, padded with fillers to ``total`` entries."""
    tokens = list(SPECIAL_TOKENS) + list(_WORDS)
    tokens += [f"filler{i}" for i in range(max(0, total - len(tokens)))]
    return tokens


def build_synthetic_corpus(
    directory,
    n_items: int,
    grid_shape: tuple[int, int, int] = (7, 7, 8),
    seed: int = 0,
    n_scene_types: int | None = None,
    noise: float = 0.05,
) -> tuple[str, str]:
    """Write a toy corpus; returns (dataset path, vocab path).

    Each item belongs to a scene type with a fixed caption and two concept
    words; its feature grid is the scene prototype plus small noise, so a
    capable model can map features to captions.
    """
    os.makedirs(directory, exist_ok=True)
    rng = np.random.default_rng(seed)
    vocab_path = os.path.join(directory, "vocab.txt")
    write_vocab(vocab_path, synthetic_vocab_tokens())

    n_types = n_scene_types or n_items
    adjectives = _WORDS[0:8]
    nouns = _WORDS[8:16]
    verbs = _WORDS[16:24]
    places = _WORDS[24:36]
    prototypes = rng.normal(0.0, 1.0, size=(n_types,) + grid_shape)
    captions, concept_lists = [], []
    for t in range(n_types):
        adj = adjectives[t % len(adjectives)]
        noun = nouns[(t // len(adjectives) + t) % len(nouns)]
        verb = verbs[t % len(verbs)]
        place = places[t % len(places)]
        captions.append(f"the {adj} {noun} {verb} {place}")
        concept_lists.append([noun, place])

    dataset_path = os.path.join(directory, "dataset.jsonl")
    with open(dataset_path, "w", encoding="utf-8") as fh:
        for i in range(n_items):
            t = i % n_types
            grid_values = prototypes[t] + rng.normal(0.0, noise, size=grid_shape)
            feature_file = f"features_{i:04d}.lten"
            save_grid_features(
                os.path.join(directory, feature_file),
                GridFeature(Tensor(grid_values)),
            )
            record = {
                "id": f"synth{i:04d}",
                "caption": captions[t],
                "feature_file": feature_file,
                "concepts": concept_lists[t],
            }
            fh.write(json.dumps(record) + "\n")
    return dataset_path, vocab_path


def load_synthetic(directory) -> tuple[list[Item], Vocab]:
    vocab = load_vocab(os.path.join(directory, "vocab.txt"))
    items = load_dataset(os.path.join(directory, "dataset.jsonl"), vocab)
    return items, vocab
