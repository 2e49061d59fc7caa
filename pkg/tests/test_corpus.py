import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transrec import corpus
from transrec.corpus import (
    Dataset,
    InteractionSequence,
    Modality,
    SyntheticWorldConfig,
    generate_synthetic_world,
    leave_one_out_split,
    load_catalog,
    load_domain_dir,
    load_interactions,
    load_oracle,
    subsample,
    write_catalog,
    write_domain_dir,
    write_interactions,
    write_oracle,
)
from transrec.errors import (
    BadFraction,
    BadImageShape,
    DuplicateItemId,
    EmptyDataset,
    IoFailure,
    MalformedRecord,
    TokenOutOfRange,
    UnknownItemRef,
)

from conftest import TINY_WORLD, build_dataset, make_text_item, make_vision_item


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# file round trips and validation


def test_catalog_round_trip(tmp_path, mixed_dataset):
    path = tmp_path / "catalog.jsonl"
    write_catalog(mixed_dataset.catalog, path)
    back = load_catalog(path)
    assert list(back) == list(mixed_dataset.catalog)
    for item_id, item in mixed_dataset.catalog.items():
        loaded = back[item_id]
        assert loaded.modality is item.modality
        assert loaded.text_tokens == item.text_tokens
        if item.image is None:
            assert loaded.image is None
        else:
            assert loaded.image.dtype == np.uint8
            assert np.array_equal(loaded.image, item.image)
        assert loaded.features == item.features


def test_interactions_round_trip(tmp_path, mixed_dataset):
    path = tmp_path / "interactions.jsonl"
    write_interactions(mixed_dataset.users, path)
    back = load_interactions(path, mixed_dataset.catalog, max_seq_len=10)
    assert [u.user_id for u in back.users] == [u.user_id for u in mixed_dataset.users]
    for orig, loaded in zip(mixed_dataset.users, back.users):
        assert loaded.items == orig.items
        assert loaded.features == orig.features


def test_domain_dir_round_trip(tmp_path, tiny_source):
    write_domain_dir(tiny_source, tmp_path / "d")
    back = load_domain_dir(tmp_path / "d", max_seq_len=tiny_source.max_seq_len, domain="source")
    assert back.n_items == tiny_source.n_items
    assert back.n_users == tiny_source.n_users
    assert [u.items for u in back.users] == [u.items for u in tiny_source.users]


def test_missing_catalog_file_is_io_failure(tmp_path):
    with pytest.raises(IoFailure):
        load_catalog(tmp_path / "absent.jsonl")


def test_catalog_rejects_duplicate_item(tmp_path):
    path = tmp_path / "c.jsonl"
    row = '{"item_id":"a","modality":"text","text_tokens":[1]}'
    write_lines(path, [row, row])
    with pytest.raises(DuplicateItemId):
        load_catalog(path)


def test_catalog_rejects_bad_json(tmp_path):
    path = tmp_path / "c.jsonl"
    write_lines(path, ["{not json"])
    with pytest.raises(MalformedRecord) as err:
        load_catalog(path)
    assert err.value.line_no == 1


def test_catalog_rejects_unknown_modality(tmp_path):
    path = tmp_path / "c.jsonl"
    write_lines(path, ['{"item_id":"a","modality":"audio"}'])
    with pytest.raises(MalformedRecord):
        load_catalog(path)


def test_catalog_rejects_token_beyond_vocab(tmp_path):
    path = tmp_path / "c.jsonl"
    write_lines(path, ['{"item_id":"a","modality":"text","text_tokens":[3,9]}'])
    with pytest.raises(TokenOutOfRange):
        load_catalog(path, vocab_size=8)
    assert len(load_catalog(path, vocab_size=10)) == 1


def test_catalog_rejects_bad_images(tmp_path):
    ragged = '{"item_id":"a","modality":"vision","image":[[[1,2],[3]]]}'
    flat = '{"item_id":"a","modality":"vision","image":[[1,2],[3,4]]}'
    out_of_range = '{"item_id":"a","modality":"vision","image":[[[300]]]}'
    for row in (ragged, flat, out_of_range):
        path = tmp_path / "c.jsonl"
        write_lines(path, [row])
        with pytest.raises(MalformedRecord):
            load_catalog(path)


def test_catalog_rejects_inconsistent_image_shapes(tmp_path):
    path = tmp_path / "c.jsonl"
    write_lines(
        path,
        [
            '{"item_id":"a","modality":"vision","image":[[[1,2],[3,4]]]}',
            '{"item_id":"b","modality":"vision","image":[[[1]]]}',
        ],
    )
    with pytest.raises(BadImageShape):
        load_catalog(path)


def test_empty_catalog_rejected(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text("\n", encoding="utf-8")
    with pytest.raises(EmptyDataset):
        load_catalog(path)


def test_interactions_reject_unknown_item(tmp_path, mixed_dataset):
    path = tmp_path / "i.jsonl"
    write_lines(path, ['{"user_id":"u","items":["t0","ghost","t1"]}'])
    with pytest.raises(UnknownItemRef):
        load_interactions(path, mixed_dataset.catalog)


def test_interactions_reject_duplicate_user(tmp_path, mixed_dataset):
    path = tmp_path / "i.jsonl"
    row = '{"user_id":"u","items":["t0","t1","t2"]}'
    write_lines(path, [row, row])
    with pytest.raises(MalformedRecord):
        load_interactions(path, mixed_dataset.catalog)


def test_short_users_dropped_with_warning(tmp_path, mixed_dataset, caplog):
    path = tmp_path / "i.jsonl"
    write_lines(
        path,
        [
            '{"user_id":"long","items":["t0","t1","t2","v0"]}',
            '{"user_id":"short","items":["t0","t1"]}',
            '{"user_id":"shorter","items":["t0"]}',
        ],
    )
    with caplog.at_level(logging.WARNING, logger="transrec.corpus"):
        ds = load_interactions(path, mixed_dataset.catalog)
    assert [u.user_id for u in ds.users] == ["long"]
    assert any("dropped 2 user(s)" in rec.getMessage() for rec in caplog.records)


def test_all_users_too_short_is_empty(tmp_path, mixed_dataset):
    path = tmp_path / "i.jsonl"
    write_lines(path, ['{"user_id":"u","items":["t0","t1"]}'])
    with pytest.raises(EmptyDataset):
        load_interactions(path, mixed_dataset.catalog)


# ---------------------------------------------------------------------------
# truncation and split invariants


@given(
    raw_len=st.integers(min_value=3, max_value=40),
    max_seq_len=st.integers(min_value=3, max_value=12),
)
@settings(max_examples=60, deadline=None)
def test_truncation_keeps_exact_suffix(tmp_path_factory, raw_len, max_seq_len):
    tmp_path = tmp_path_factory.mktemp("trunc")
    n_items = 45
    catalog = {f"i{j}": make_text_item(f"i{j}", [j % 7]) for j in range(n_items)}
    raw_items = [f"i{j % n_items}" for j in range(raw_len)]
    path = tmp_path / "i.jsonl"
    write_interactions(
        [InteractionSequence(user_id="u", items=tuple(raw_items))], path
    )
    ds = load_interactions(path, catalog, max_seq_len=max_seq_len)
    if raw_len >= 3 and min(raw_len, max_seq_len) >= 3:
        assert ds.users[0].items == tuple(raw_items[-min(raw_len, max_seq_len):])


def test_split_reconstruction(tiny_source):
    view = leave_one_out_split(tiny_source)
    by_id = {u.user_id: u for u in view.train}
    valid_by_id = {e.user_id: e for e in view.valid}
    test_by_id = {e.user_id: e for e in view.test}
    assert set(by_id) == set(valid_by_id) == set(test_by_id)
    for user in tiny_source.users:
        rebuilt = (
            by_id[user.user_id].items
            + (valid_by_id[user.user_id].target,)
            + (test_by_id[user.user_id].target,)
        )
        assert rebuilt == user.items


def test_split_contexts():
    ds = build_dataset(
        [make_text_item(f"i{j}", [j]) for j in range(5)],
        [("u", ["i0", "i1", "i2", "i3", "i4"], None)],
    )
    view = leave_one_out_split(ds)
    assert view.train[0].items == ("i0", "i1", "i2")
    assert view.valid[0].context == ("i0", "i1", "i2")
    assert view.valid[0].target == "i3"
    assert view.test[0].context == ("i0", "i1", "i2", "i3")
    assert view.test[0].target == "i4"


def test_split_carries_user_features():
    ds = build_dataset(
        [make_text_item(f"i{j}", [j]) for j in range(4)],
        [("u", ["i0", "i1", "i2", "i3"], {"gender": 1})],
    )
    view = leave_one_out_split(ds)
    assert view.valid[0].features == {"gender": 1}
    assert view.test[0].features == {"gender": 1}


# ---------------------------------------------------------------------------
# subsampling


def test_subsample_rejects_bad_fractions(tiny_source):
    for bad in (0.0, -0.1, 1.5, float("nan")):
        with pytest.raises(BadFraction):
            subsample(tiny_source, bad, seed=0)


def test_subsample_full_fraction_keeps_everyone(tiny_source):
    ds = subsample(tiny_source, 1.0, seed=0)
    assert [u.user_id for u in ds.users] == [u.user_id for u in tiny_source.users]


def test_subsample_rounds_user_count(tiny_source):
    ds = subsample(tiny_source, 0.25, seed=3)
    assert ds.n_users == round(0.25 * tiny_source.n_users)
    assert ds.n_items == tiny_source.n_items


def test_subsample_is_deterministic(tiny_source):
    a = subsample(tiny_source, 0.5, seed=11)
    b = subsample(tiny_source, 0.5, seed=11)
    assert [u.user_id for u in a.users] == [u.user_id for u in b.users]
    c = subsample(tiny_source, 0.5, seed=12)
    assert [u.user_id for u in a.users] != [u.user_id for u in c.users]


@given(
    f1=st.floats(min_value=0.05, max_value=1.0),
    f2=st.floats(min_value=0.05, max_value=1.0),
    seed=st.integers(min_value=0, max_value=2**31 - 1),
)
@settings(max_examples=40, deadline=None)
def test_subsample_monotone_in_fraction(tiny_source, f1, f2, seed):
    lo, hi = sorted((f1, f2))
    small = {u.user_id for u in subsample(tiny_source, lo, seed).users}
    large = {u.user_id for u in subsample(tiny_source, hi, seed).users}
    assert small <= large


def test_subsample_exhausted_fraction(tiny_source):
    with pytest.raises(EmptyDataset):
        subsample(tiny_source, 1e-9, seed=0)


# ---------------------------------------------------------------------------
# synthetic world


def test_world_has_expected_domains(tiny_world):
    domains = tiny_world.domains()
    assert list(domains) == list(corpus.DOMAIN_NAMES)
    prefixes = {
        "source": "src",
        "target_mixed": "tmx",
        "target_vision": "tvi",
        "target_text_feat": "ttf",
        "target_shifted": "tsh",
    }
    for name, ds in domains.items():
        prefix = prefixes[name]
        assert all(iid.startswith(prefix) for iid in ds.catalog)
        assert all(u.user_id.startswith(prefix) for u in ds.users)


def test_world_catalogs_are_disjoint(tiny_world):
    seen = set()
    for ds in tiny_world.domains().values():
        ids = set(ds.catalog)
        assert not (ids & seen)
        seen |= ids


def test_stream_lengths_and_membership(tiny_world):
    cfg = TINY_WORLD
    for ds in tiny_world.domains().values():
        for user in ds.users:
            assert cfg.min_stream_len <= len(user.items) <= cfg.max_stream_len
            assert len(set(user.items)) == len(user.items)
            assert all(item in ds.catalog for item in user.items)


def test_domain_modalities(tiny_world):
    domains = tiny_world.domains()
    for name in ("source", "target_mixed"):
        kinds = {item.modality for item in domains[name].catalog.values()}
        assert kinds == {Modality.TEXT, Modality.VISION}
    for name in ("target_vision", "target_shifted"):
        kinds = {item.modality for item in domains[name].catalog.values()}
        assert kinds == {Modality.VISION}
    kinds = {item.modality for item in domains["target_text_feat"].catalog.values()}
    assert kinds == {Modality.TEXT}


def test_features_only_on_feature_domain(tiny_world):
    domains = tiny_world.domains()
    featured = domains["target_text_feat"]
    assert all(item.features and "category" in item.features for item in featured.catalog.values())
    assert all(u.features and set(u.features) == {"age", "gender"} for u in featured.users)
    for name, ds in domains.items():
        if name == "target_text_feat":
            continue
        assert all(item.features is None for item in ds.catalog.values())
        assert all(u.features is None for u in ds.users)


def test_shifted_domain_image_shape(tiny_world):
    cfg = TINY_WORLD
    c, h, w = cfg.image_shape
    shifted = tiny_world.domains()["target_shifted"]
    for item in shifted.catalog.values():
        assert item.image.shape == (c, h + 4, w + 4)
    plain = tiny_world.domains()["target_vision"]
    for item in plain.catalog.values():
        assert item.image.shape == (c, h, w)


def test_text_tokens_within_vocab(tiny_world):
    cfg = TINY_WORLD
    for ds in tiny_world.domains().values():
        for item in ds.catalog.values():
            if item.modality is Modality.TEXT:
                assert len(item.text_tokens) == cfg.text_len
                assert all(0 <= t < cfg.text_vocab for t in item.text_tokens)


def test_generation_is_deterministic():
    a = generate_synthetic_world(TINY_WORLD)
    b = generate_synthetic_world(TINY_WORLD)
    for name, ds in a.domains().items():
        other = b.domains()[name]
        assert [u.items for u in ds.users] == [u.items for u in other.users]
        for iid, item in ds.catalog.items():
            twin = other.catalog[iid]
            assert item.text_tokens == twin.text_tokens
            if item.image is not None:
                assert np.array_equal(item.image, twin.image)


def test_last_item_is_strongest_preference(tiny_world):
    """Streams are stored weakest-first, so the held-out last item should
    usually be the user's oracle favorite within the stream."""
    oracle = tiny_world.oracle
    wins = 0
    total = 0
    for user in tiny_world.source.users:
        scores = oracle.scores(user.user_id, user.items)
        total += 1
        if np.argmax(scores) == len(user.items) - 1:
            wins += 1
    assert wins / total > 0.5


def oracle_hr_at_10(ds: Dataset, oracle) -> float:
    item_ids = list(ds.catalog)
    hits = 0
    for user in ds.users:
        target = user.items[-1]
        scores = oracle.scores(user.user_id, item_ids)
        order = np.argsort(-scores, kind="stable")
        top = [item_ids[j] for j in order[:10]]
        hits += target in top
    return hits / len(ds.users)


def test_oracle_separability_low_noise():
    # a 20x margin over random HR@10 = 10/n needs n >= 200 to be satisfiable,
    # so this check runs on catalogs big enough for the bound to mean something
    cfg = SyntheticWorldConfig(
        n_source_users=60,
        n_target_users=40,
        n_source_items=420,
        n_target_items=400,
        min_stream_len=6,
        max_stream_len=10,
        noise_temperature=0.1,
        seed=5,
    )
    world = generate_synthetic_world(cfg)
    for name, ds in world.domains().items():
        random_hr = 10.0 / ds.n_items
        hr = oracle_hr_at_10(ds, world.oracle)
        assert hr >= 20 * random_hr, f"{name}: oracle HR@10 {hr:.3f} < 20x random {random_hr:.3f}"


def test_oracle_hr_approaches_one_as_noise_vanishes():
    cfg = SyntheticWorldConfig(
        n_source_users=50,
        n_target_users=30,
        n_source_items=40,
        n_target_items=30,
        min_stream_len=6,
        max_stream_len=10,
        noise_temperature=1e-4,
        seed=9,
    )
    world = generate_synthetic_world(cfg)
    assert oracle_hr_at_10(world.source, world.oracle) >= 0.95


def test_oracle_sidecar_round_trip(tmp_path, tiny_world):
    path = tmp_path / "oracle.jsonl"
    write_oracle(tiny_world.oracle, path, tiny_world.source)
    back = load_oracle(path)
    for user in tiny_world.source.users:
        np.testing.assert_array_equal(
            back.user_latents[user.user_id], tiny_world.oracle.user_latents[user.user_id]
        )
    for iid in tiny_world.source.catalog:
        np.testing.assert_array_equal(back.item_latents[iid], tiny_world.oracle.item_latents[iid])


def test_world_config_validation():
    with pytest.raises(Exception):
        SyntheticWorldConfig(n_source_users=0).validate()
    with pytest.raises(Exception):
        SyntheticWorldConfig(min_stream_len=9, max_stream_len=8).validate()
    with pytest.raises(Exception):
        SyntheticWorldConfig(n_target_items=10, max_stream_len=16).validate()
    with pytest.raises(Exception):
        SyntheticWorldConfig(modality_mix=1.5).validate()
