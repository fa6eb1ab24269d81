"""Shared toy-scale fixtures: tiny models and in-memory corpora."""

import numpy as np
import pytest

from lightcap.data import Item
from lightcap.fusion import FusionConfig
from lightcap.model import CaptionModel, ModelConfig, SpecialIds
from lightcap.tensor import Tensor
from lightcap.vision import GridFeature

TOY_SPECIALS = SpecialIds(pad=0, cls=1, sep=2, mask=3, unk=4)


def toy_config(
    layers=2,
    hidden=8,
    heads=2,
    ffn=12,
    vocab_size=16,
    grid_channels=5,
    max_positions=64,
    n_branches=3,
    modulator_hidden=4,
):
    return ModelConfig(
        fusion=FusionConfig(
            layers=layers,
            hidden=hidden,
            heads=heads,
            ffn=ffn,
            max_positions=max_positions,
            vocab_size=vocab_size,
            grid_channels=grid_channels,
        ),
        n_branches=n_branches,
        modulator_hidden=modulator_hidden,
        specials=TOY_SPECIALS,
    )


def make_items(config, n_items, rng, grid_hw=(2, 2), caption_len=4, n_concepts=2):
    """Random in-memory items with valid (non-special) token ids."""
    word_ids = [
        i for i in range(config.fusion.vocab_size)
        if i not in (config.specials.pad, config.specials.cls, config.specials.sep,
                     config.specials.mask, config.specials.unk)
    ]
    items = []
    for i in range(n_items):
        grid = GridFeature(
            Tensor(rng.normal(size=(grid_hw[0], grid_hw[1], config.fusion.grid_channels)))
        )
        caption = rng.choice(word_ids, size=caption_len, replace=True)
        concepts = rng.choice(word_ids, size=n_concepts, replace=False)
        items.append(
            Item(
                item_id=f"toy{i}",
                grid=grid,
                concept_ids=np.asarray(concepts, dtype=np.int64),
                caption_ids=np.asarray(caption, dtype=np.int64),
                caption_text=" ".join(str(t) for t in caption),
                concepts=[],
                regions=[],
            )
        )
    return items


@pytest.fixture
def toy_model():
    return CaptionModel(toy_config(), seed=0)


@pytest.fixture
def toy_items(toy_model):
    rng = np.random.default_rng(100)
    return make_items(toy_model.config, 4, rng)
