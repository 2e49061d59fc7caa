import numpy as np
import pytest
import torch

from transrec.corpus import (
    Dataset,
    InteractionSequence,
    Item,
    Modality,
    SyntheticWorldConfig,
    generate_synthetic_world,
)

torch.set_num_threads(1)

TINY_WORLD = SyntheticWorldConfig(
    n_source_users=80,
    n_target_users=48,
    n_source_items=30,
    n_target_items=24,
    min_stream_len=6,
    max_stream_len=12,
    seed=7,
)


@pytest.fixture(scope="session")
def tiny_world():
    return generate_synthetic_world(TINY_WORLD)


@pytest.fixture(scope="session")
def tiny_source(tiny_world):
    return tiny_world.source


def make_text_item(item_id: str, tokens, features=None) -> Item:
    return Item(item_id=item_id, modality=Modality.TEXT, text_tokens=tuple(tokens), features=features)


def make_vision_item(item_id: str, shape=(1, 4, 4), fill=0, features=None) -> Item:
    image = np.full(shape, fill, dtype=np.uint8)
    return Item(item_id=item_id, modality=Modality.VISION, image=image, features=features)


def make_id_item(item_id: str, features=None) -> Item:
    return Item(item_id=item_id, modality=Modality.ID, features=features)


def build_dataset(catalog_items, sequences, *, domain="unit", max_seq_len=10) -> Dataset:
    catalog = {item.item_id: item for item in catalog_items}
    users = [
        InteractionSequence(user_id=uid, items=tuple(items), features=feats)
        for uid, items, feats in sequences
    ]
    return Dataset(domain=domain, catalog=catalog, users=users, max_seq_len=max_seq_len)


@pytest.fixture
def mixed_dataset() -> Dataset:
    items = [
        make_text_item("t0", [1, 2, 3]),
        make_vision_item("v0", fill=10),
        make_text_item("t1", [4, 5]),
        make_vision_item("v1", fill=200),
        make_text_item("t2", [0, 6, 2, 1]),
        make_vision_item("v2", fill=128),
    ]
    sequences = [
        ("u0", ["t0", "v0", "t1", "v1"], None),
        ("u1", ["v2", "t2", "t0"], None),
        ("u2", ["t1", "t2", "v1", "v0", "t0"], None),
    ]
    return build_dataset(items, sequences)
