"""Catalog and interaction data: loading, splits, subsampling, synthesis.

File formats are JSON lines. A catalog row carries an item id, a modality
tag, and that modality's content (token list or pixel grid); an interaction
row carries a user id and an ordered item-id list. Optional categorical
features ride along as a string-to-int map on either row type.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import (
    BadFraction,
    BadImageShape,
    ConfigInvalid,
    DuplicateItemId,
    EmptyDataset,
    IoFailure,
    MalformedRecord,
    SequenceTooShort,
    TokenOutOfRange,
    UnknownItemRef,
)

logger = logging.getLogger(__name__)


def _read_text(path: str) -> str:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise IoFailure(path, f"cannot read ({exc.strerror or exc})") from exc

# leave-one-out needs a train item, a validation target, and a test target
MIN_SEQUENCE_LEN = 3


class Modality(str, Enum):
    TEXT = "text"
    VISION = "vision"
    ID = "id"


@dataclass(frozen=True, eq=False)
class Item:
    item_id: str
    modality: Modality
    text_tokens: tuple[int, ...] | None = None
    image: np.ndarray | None = None  # uint8, [channels, height, width]
    features: dict[str, int] | None = None


@dataclass(frozen=True)
class InteractionSequence:
    user_id: str
    items: tuple[str, ...]
    features: dict[str, int] | None = None


class Dataset:
    """An immutable catalog plus the user sequences drawn from it.

    ``item_index`` maps item ids to dense indices in catalog insertion
    order; every tensor-level component addresses items by that index.
    """

    def __init__(
        self,
        domain: str,
        catalog: dict[str, Item],
        users: list[InteractionSequence],
        max_seq_len: int,
    ):
        if not catalog:
            raise EmptyDataset(f"domain {domain!r} has an empty catalog")
        if max_seq_len < MIN_SEQUENCE_LEN:
            raise ConfigInvalid("max_seq_len", f"must be >= {MIN_SEQUENCE_LEN}, got {max_seq_len}")
        self.domain = domain
        self.catalog = dict(catalog)
        self.users = list(users)
        self.max_seq_len = max_seq_len
        self.item_index = {item_id: i for i, item_id in enumerate(self.catalog)}
        self.item_ids = list(self.catalog)

    @property
    def n_items(self) -> int:
        return len(self.catalog)

    @property
    def n_users(self) -> int:
        return len(self.users)

    def __repr__(self) -> str:
        return (
            f"Dataset(domain={self.domain!r}, items={self.n_items}, "
            f"users={self.n_users}, max_seq_len={self.max_seq_len})"
        )


@dataclass(frozen=True)
class HoldoutExample:
    """One ranking instance: the context the model may see, plus the answer."""

    user_id: str
    context: tuple[str, ...]
    target: str
    features: dict[str, int] | None = None


@dataclass(frozen=True)
class SplitView:
    train: tuple[InteractionSequence, ...]
    valid: tuple[HoldoutExample, ...]
    test: tuple[HoldoutExample, ...]


# ---------------------------------------------------------------------------
# loading and writing


def _parse_line(path: str, line_no: int, raw: str) -> dict:
    try:
        record = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MalformedRecord(path, line_no, f"not valid JSON ({exc.msg})") from exc
    if not isinstance(record, dict):
        raise MalformedRecord(path, line_no, "record is not a JSON object")
    return record


def _parse_features(path: str, line_no: int, record: dict) -> dict[str, int] | None:
    if "features" not in record:
        return None
    raw = record["features"]
    if not isinstance(raw, dict):
        raise MalformedRecord(path, line_no, "features must be an object")
    out: dict[str, int] = {}
    for name, value in raw.items():
        if not isinstance(name, str) or not isinstance(value, int) or isinstance(value, bool):
            raise MalformedRecord(path, line_no, "features must map names to integer ids")
        out[name] = value
    return out


def load_catalog(
    path: str | Path,
    *,
    vocab_size: int | None = None,
    image_shape: tuple[int, int, int] | None = None,
) -> dict[str, Item]:
    """Read a JSON-lines catalog file into an ordered id-to-item map.

    Token ids are checked against ``vocab_size`` and pixel grids against
    ``image_shape`` when those bounds are supplied; with no declared shape
    the first vision row fixes it and later rows must agree.
    """
    path = str(path)
    catalog: dict[str, Item] = {}
    seen_shape = image_shape
    for line_no, raw in enumerate(_read_text(path).splitlines(), start=1):
        if not raw.strip():
            continue
        record = _parse_line(path, line_no, raw)
        item_id = record.get("item_id")
        if not isinstance(item_id, str) or not item_id:
            raise MalformedRecord(path, line_no, "missing or non-string item_id")
        if item_id in catalog:
            raise DuplicateItemId(item_id, line_no)
        modality_raw = record.get("modality")
        try:
            modality = Modality(modality_raw)
        except ValueError:
            raise MalformedRecord(
                path, line_no, f"modality must be one of text/vision/id, got {modality_raw!r}"
            ) from None

        tokens: tuple[int, ...] | None = None
        image: np.ndarray | None = None
        if modality is Modality.TEXT:
            raw_tokens = record.get("text_tokens")
            if not isinstance(raw_tokens, list) or not raw_tokens:
                raise MalformedRecord(path, line_no, "text item needs a non-empty text_tokens list")
            for tok in raw_tokens:
                if not isinstance(tok, int) or isinstance(tok, bool) or tok < 0:
                    raise MalformedRecord(path, line_no, "text_tokens must be non-negative integers")
                if vocab_size is not None and tok >= vocab_size:
                    raise TokenOutOfRange(item_id, tok, vocab_size)
            tokens = tuple(raw_tokens)
        elif modality is Modality.VISION:
            raw_image = record.get("image")
            if not isinstance(raw_image, list):
                raise MalformedRecord(path, line_no, "vision item needs an image grid")
            try:
                arr = np.asarray(raw_image, dtype=np.int64)
            except ValueError:
                raise MalformedRecord(path, line_no, "image grid is ragged") from None
            if arr.ndim != 3:
                raise MalformedRecord(
                    path, line_no, f"image must be [channels][height][width], got {arr.ndim} dims"
                )
            if arr.size == 0:
                raise MalformedRecord(path, line_no, "image grid is empty")
            if int(arr.min()) < 0 or int(arr.max()) > 255:
                raise MalformedRecord(path, line_no, "pixel values must lie in [0, 255]")
            if seen_shape is None:
                seen_shape = tuple(arr.shape)
            elif tuple(arr.shape) != tuple(seen_shape):
                raise BadImageShape(item_id, arr.shape, seen_shape)
            image = arr.astype(np.uint8)

        features = _parse_features(path, line_no, record)
        catalog[item_id] = Item(
            item_id=item_id,
            modality=modality,
            text_tokens=tokens,
            image=image,
            features=features,
        )
    if not catalog:
        raise EmptyDataset(f"catalog file {path!r} has no items")
    return catalog


def load_interactions(
    path: str | Path,
    catalog: dict[str, Item],
    *,
    max_seq_len: int = 25,
    domain: str = "default",
) -> Dataset:
    """Read interaction sequences, truncate each to its most recent
    ``max_seq_len`` items, and drop users shorter than three interactions
    (counted in a warning, not an error)."""
    path = str(path)
    users: list[InteractionSequence] = []
    seen_users: set[str] = set()
    dropped = 0
    for line_no, raw in enumerate(_read_text(path).splitlines(), start=1):
        if not raw.strip():
            continue
        record = _parse_line(path, line_no, raw)
        user_id = record.get("user_id")
        if not isinstance(user_id, str) or not user_id:
            raise MalformedRecord(path, line_no, "missing or non-string user_id")
        if user_id in seen_users:
            raise MalformedRecord(path, line_no, f"duplicate user id {user_id!r}")
        seen_users.add(user_id)
        raw_items = record.get("items")
        if not isinstance(raw_items, list) or not raw_items:
            raise MalformedRecord(path, line_no, "missing or empty items list")
        for item_id in raw_items:
            if not isinstance(item_id, str):
                raise MalformedRecord(path, line_no, "items must be a list of item-id strings")
            if item_id not in catalog:
                raise UnknownItemRef(user_id, item_id)
        trimmed = tuple(raw_items[-max_seq_len:])
        if len(trimmed) < MIN_SEQUENCE_LEN:
            dropped += 1
            continue
        users.append(
            InteractionSequence(
                user_id=user_id,
                items=trimmed,
                features=_parse_features(path, line_no, record),
            )
        )
    if dropped:
        logger.warning(
            "dropped %d user(s) with fewer than %d interactions from %s",
            dropped,
            MIN_SEQUENCE_LEN,
            path,
        )
    if not users:
        raise EmptyDataset(f"no usable user sequences in {path!r}")
    return Dataset(domain=domain, catalog=catalog, users=users, max_seq_len=max_seq_len)


def _item_record(item: Item) -> dict:
    record: dict = {"item_id": item.item_id, "modality": item.modality.value}
    if item.text_tokens is not None:
        record["text_tokens"] = list(item.text_tokens)
    if item.image is not None:
        record["image"] = item.image.astype(int).tolist()
    if item.features is not None:
        record["features"] = item.features
    return record


def write_catalog(catalog: dict[str, Item], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in catalog.values():
            fh.write(json.dumps(_item_record(item), separators=(",", ":")) + "\n")


def write_interactions(users: Iterable[InteractionSequence], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for user in users:
            record: dict = {"user_id": user.user_id, "items": list(user.items)}
            if user.features is not None:
                record["features"] = user.features
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def load_domain_dir(
    dir_path: str | Path,
    *,
    max_seq_len: int = 25,
    domain: str | None = None,
    vocab_size: int | None = None,
    image_shape: tuple[int, int, int] | None = None,
) -> Dataset:
    """Load ``catalog.jsonl`` and ``interactions.jsonl`` from one directory."""
    dir_path = Path(dir_path)
    catalog = load_catalog(dir_path / "catalog.jsonl", vocab_size=vocab_size, image_shape=image_shape)
    return load_interactions(
        dir_path / "interactions.jsonl",
        catalog,
        max_seq_len=max_seq_len,
        domain=domain if domain is not None else dir_path.name,
    )


def write_domain_dir(dataset: Dataset, dir_path: str | Path) -> None:
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    write_catalog(dataset.catalog, dir_path / "catalog.jsonl")
    write_interactions(dataset.users, dir_path / "interactions.jsonl")


# ---------------------------------------------------------------------------
# splitting and subsampling


def leave_one_out_split(dataset: Dataset) -> SplitView:
    """Hold out each user's last item for test and second-to-last for
    validation; everything earlier is training material.

    Validation contexts stop before the validation target, test contexts
    include it, so the test context is the full sequence minus its last item.
    """
    train: list[InteractionSequence] = []
    valid: list[HoldoutExample] = []
    test: list[HoldoutExample] = []
    for user in dataset.users:
        if len(user.items) < MIN_SEQUENCE_LEN:
            raise SequenceTooShort(
                f"user {user.user_id!r} has {len(user.items)} interactions; "
                f"leave-one-out needs at least {MIN_SEQUENCE_LEN}"
            )
        train.append(replace(user, items=user.items[:-2]))
        valid.append(
            HoldoutExample(
                user_id=user.user_id,
                context=user.items[:-2],
                target=user.items[-2],
                features=user.features,
            )
        )
        test.append(
            HoldoutExample(
                user_id=user.user_id,
                context=user.items[:-1],
                target=user.items[-1],
                features=user.features,
            )
        )
    return SplitView(train=tuple(train), valid=tuple(valid), test=tuple(test))


def subsample(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Keep a seeded fraction of whole users; the catalog is untouched.

    Selection takes the first ``round(fraction * n_users)`` entries of one
    seeded permutation, so at a fixed seed a smaller fraction's user set is
    a subset of a larger fraction's.
    """
    if not isinstance(fraction, (int, float)) or math.isnan(fraction):
        raise BadFraction(fraction)
    if not 0.0 < fraction <= 1.0:
        raise BadFraction(fraction)
    n_keep = round(fraction * dataset.n_users)
    if n_keep == 0:
        raise EmptyDataset(
            f"fraction {fraction} of {dataset.n_users} users rounds to zero"
        )
    order = np.random.default_rng(seed).permutation(dataset.n_users)
    keep = sorted(int(i) for i in order[:n_keep])
    users = [dataset.users[i] for i in keep]
    return Dataset(
        domain=dataset.domain,
        catalog=dataset.catalog,
        users=users,
        max_seq_len=dataset.max_seq_len,
    )


# ---------------------------------------------------------------------------
# synthetic world


@dataclass(frozen=True)
class SyntheticWorldConfig:
    """Knobs for the generated source-plus-targets benchmark world.

    Users carry a taste vector and items a latent vector; an interaction
    stream samples items without replacement with probability proportional
    to exp(taste . latent / noise_temperature), stored weakest-preference
    first. Text tokens and pixel grids are rendered from the item latent
    through fixed random maps shared by the source and the first three
    targets; the fourth target renders through its own map at a different
    image shape and draws item latents from a shifted distribution.
    """

    n_source_users: int = 2000
    n_target_users: int = 500
    n_source_items: int = 200
    n_target_items: int = 100
    latent_dim: int = 8
    text_vocab: int = 64
    text_len: int = 16
    image_shape: tuple[int, int, int] = (1, 8, 8)
    modality_mix: float = 0.5
    noise_temperature: float = 0.2
    seed: int = 0
    min_stream_len: int = 8
    max_stream_len: int = 16
    max_seq_len: int = 25
    text_noise: float = 0.1
    image_noise: float = 0.3
    n_categories: int = 6

    def validate(self) -> None:
        positive = {
            "n_source_users": self.n_source_users,
            "n_target_users": self.n_target_users,
            "n_source_items": self.n_source_items,
            "n_target_items": self.n_target_items,
            "latent_dim": self.latent_dim,
            "text_len": self.text_len,
        }
        for name, value in positive.items():
            if not isinstance(value, int) or value < 1:
                raise ConfigInvalid(name, f"must be a positive integer, got {value!r}")
        if self.text_vocab < 2:
            raise ConfigInvalid("text_vocab", f"must be >= 2, got {self.text_vocab}")
        if len(self.image_shape) != 3 or any(int(d) < 1 for d in self.image_shape):
            raise ConfigInvalid("image_shape", f"must be three positive dims, got {self.image_shape!r}")
        if not 0.0 <= self.modality_mix <= 1.0:
            raise ConfigInvalid("modality_mix", f"must lie in [0, 1], got {self.modality_mix}")
        if not self.noise_temperature > 0.0:
            raise ConfigInvalid("noise_temperature", f"must be > 0, got {self.noise_temperature}")
        if self.min_stream_len < MIN_SEQUENCE_LEN:
            raise ConfigInvalid(
                "min_stream_len", f"must be >= {MIN_SEQUENCE_LEN}, got {self.min_stream_len}"
            )
        if self.max_stream_len < self.min_stream_len:
            raise ConfigInvalid(
                "max_stream_len",
                f"must be >= min_stream_len={self.min_stream_len}, got {self.max_stream_len}",
            )
        if self.max_stream_len > min(self.n_source_items, self.n_target_items):
            raise ConfigInvalid(
                "max_stream_len",
                "streams sample items without replacement, so max_stream_len "
                f"({self.max_stream_len}) cannot exceed the smallest catalog "
                f"({min(self.n_source_items, self.n_target_items)})",
            )
        if self.max_seq_len < MIN_SEQUENCE_LEN:
            raise ConfigInvalid("max_seq_len", f"must be >= {MIN_SEQUENCE_LEN}, got {self.max_seq_len}")
        if not 0.0 <= self.text_noise < 1.0:
            raise ConfigInvalid("text_noise", f"must lie in [0, 1), got {self.text_noise}")
        if self.image_noise < 0.0:
            raise ConfigInvalid("image_noise", f"must be >= 0, got {self.image_noise}")
        if self.n_categories < 2:
            raise ConfigInvalid("n_categories", f"must be >= 2, got {self.n_categories}")

    @property
    def shifted_image_shape(self) -> tuple[int, int, int]:
        channels, height, width = self.image_shape
        return (channels, height + 4, width + 4)


class PreferenceOracle:
    """Ground-truth affinity: the dot product of user and item latents."""

    def __init__(self, user_latents: dict[str, np.ndarray], item_latents: dict[str, np.ndarray]):
        self.user_latents = user_latents
        self.item_latents = item_latents

    def score(self, user_id: str, item_id: str) -> float:
        return float(self.user_latents[user_id] @ self.item_latents[item_id])

    def scores(self, user_id: str, item_ids: Iterable[str]) -> np.ndarray:
        taste = self.user_latents[user_id]
        return np.array([taste @ self.item_latents[i] for i in item_ids], dtype=np.float64)


@dataclass
class SyntheticWorld:
    source: Dataset
    targets: list[Dataset]
    oracle: PreferenceOracle

    def domains(self) -> dict[str, Dataset]:
        out = {self.source.domain: self.source}
        for target in self.targets:
            out[target.domain] = target
        return out


DOMAIN_NAMES = ("source", "target_mixed", "target_vision", "target_text_feat", "target_shifted")


def _render_text(latents: np.ndarray, w_text: np.ndarray, cfg: SyntheticWorldConfig, rng) -> list[tuple[int, ...]]:
    logits = latents @ w_text
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    probs = (1.0 - cfg.text_noise) * probs + cfg.text_noise / cfg.text_vocab
    out = []
    for row in probs:
        tokens = rng.choice(cfg.text_vocab, size=cfg.text_len, p=row / row.sum())
        out.append(tuple(int(t) for t in tokens))
    return out


def _render_images(
    latents: np.ndarray,
    basis: np.ndarray,
    shape: tuple[int, int, int],
    cfg: SyntheticWorldConfig,
    rng,
) -> np.ndarray:
    signal = latents @ basis
    noise = rng.normal(size=signal.shape)
    pixels = np.rint(127.5 + 48.0 * (signal + cfg.image_noise * noise))
    pixels = np.clip(pixels, 0, 255).astype(np.uint8)
    return pixels.reshape(latents.shape[0], *shape)


def _sample_streams(
    taste: np.ndarray,
    item_latents: np.ndarray,
    cfg: SyntheticWorldConfig,
    rng,
) -> list[list[int]]:
    """Per-user item streams, weakest preference first.

    A Gumbel-top-k draw over score / temperature realizes sequential
    softmax sampling without replacement; reversing it stores the
    strongest picks at the recent end of the stream.
    """
    scores = taste @ item_latents.T
    lengths = rng.integers(cfg.min_stream_len, cfg.max_stream_len + 1, size=taste.shape[0])
    gumbel = rng.gumbel(size=scores.shape)
    keys = scores / cfg.noise_temperature + gumbel
    order = np.argsort(-keys, axis=1)
    streams = []
    for u in range(taste.shape[0]):
        picked = order[u, : lengths[u]]
        streams.append([int(i) for i in picked[::-1]])
    return streams


def _build_domain(
    name: str,
    prefix: str,
    n_users: int,
    n_items: int,
    vision_fraction: float,
    item_latents: np.ndarray,
    user_latents: np.ndarray,
    renders: dict,
    cfg: SyntheticWorldConfig,
    rng,
    *,
    with_features: bool,
    w_cat: np.ndarray,
) -> tuple[Dataset, dict[str, np.ndarray], dict[str, np.ndarray]]:
    item_ids = [f"{prefix}_i{k:05d}" for k in range(n_items)]
    user_ids = [f"{prefix}_u{k:05d}" for k in range(n_users)]

    n_vision = round(vision_fraction * n_items)
    vision_mask = np.zeros(n_items, dtype=bool)
    vision_mask[rng.permutation(n_items)[:n_vision]] = True

    categories = np.argmax(item_latents @ w_cat, axis=1) if with_features else None

    catalog: dict[str, Item] = {}
    for k, item_id in enumerate(item_ids):
        features = {"category": int(categories[k])} if with_features else None
        if vision_mask[k]:
            catalog[item_id] = Item(
                item_id=item_id,
                modality=Modality.VISION,
                image=renders["images"][k],
                features=features,
            )
        else:
            catalog[item_id] = Item(
                item_id=item_id,
                modality=Modality.TEXT,
                text_tokens=renders["tokens"][k],
                features=features,
            )

    streams = _sample_streams(user_latents, item_latents, cfg, rng)
    users = []
    for u, user_id in enumerate(user_ids):
        features = None
        if with_features:
            taste = user_latents[u]
            age = int(np.digitize(taste[1 % cfg.latent_dim], [-0.6745, 0.0, 0.6745]))
            features = {"gender": int(taste[0] > 0.0), "age": age}
        users.append(
            InteractionSequence(
                user_id=user_id,
                items=tuple(item_ids[i] for i in streams[u]),
                features=features,
            )
        )

    dataset = Dataset(domain=name, catalog=catalog, users=users, max_seq_len=cfg.max_seq_len)
    user_map = {uid: user_latents[u].copy() for u, uid in enumerate(user_ids)}
    item_map = {iid: item_latents[k].copy() for k, iid in enumerate(item_ids)}
    return dataset, user_map, item_map


def generate_synthetic_world(cfg: SyntheticWorldConfig) -> SyntheticWorld:
    """Build the source domain, four target domains, and the latent oracle.

    The targets mirror distinct platform archetypes: a mixed text-plus-image
    domain, an image-only domain, a text-only domain carrying user and item
    features, and a shifted image-only domain whose pixels come from a
    different rendering map at a different resolution.
    """
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    render_seed, *domain_seeds = root.spawn(1 + len(DOMAIN_NAMES))
    render_rng = np.random.default_rng(render_seed)

    scale = 1.0 / math.sqrt(cfg.latent_dim)
    n_pixels = int(np.prod(cfg.image_shape))
    n_pixels_shifted = int(np.prod(cfg.shifted_image_shape))
    w_text = render_rng.normal(size=(cfg.latent_dim, cfg.text_vocab)) * scale
    basis = render_rng.normal(size=(cfg.latent_dim, n_pixels)) * scale
    w_cat = render_rng.normal(size=(cfg.latent_dim, cfg.n_categories))
    basis_shifted = render_rng.normal(size=(cfg.latent_dim, n_pixels_shifted)) * scale

    spec = {
        "source": dict(
            prefix="src",
            n_users=cfg.n_source_users,
            n_items=cfg.n_source_items,
            vision_fraction=cfg.modality_mix,
            with_features=False,
            shifted=False,
        ),
        "target_mixed": dict(
            prefix="tmx",
            n_users=cfg.n_target_users,
            n_items=cfg.n_target_items,
            vision_fraction=cfg.modality_mix,
            with_features=False,
            shifted=False,
        ),
        "target_vision": dict(
            prefix="tvi",
            n_users=cfg.n_target_users,
            n_items=cfg.n_target_items,
            vision_fraction=1.0,
            with_features=False,
            shifted=False,
        ),
        "target_text_feat": dict(
            prefix="ttf",
            n_users=cfg.n_target_users,
            n_items=cfg.n_target_items,
            vision_fraction=0.0,
            with_features=True,
            shifted=False,
        ),
        "target_shifted": dict(
            prefix="tsh",
            n_users=cfg.n_target_users,
            n_items=cfg.n_target_items,
            vision_fraction=1.0,
            with_features=False,
            shifted=True,
        ),
    }

    source: Dataset | None = None
    targets: list[Dataset] = []
    user_latents: dict[str, np.ndarray] = {}
    item_latents: dict[str, np.ndarray] = {}

    for name, seed_seq in zip(DOMAIN_NAMES, domain_seeds):
        info = spec[name]
        rng = np.random.default_rng(seed_seq)
        z = rng.normal(size=(info["n_items"], cfg.latent_dim))
        if info["shifted"]:
            z = 0.8 + 1.3 * z
        taste = rng.normal(size=(info["n_users"], cfg.latent_dim))

        shape = cfg.shifted_image_shape if info["shifted"] else cfg.image_shape
        domain_basis = basis_shifted if info["shifted"] else basis
        renders = {
            "tokens": _render_text(z, w_text, cfg, rng),
            "images": _render_images(z, domain_basis, shape, cfg, rng),
        }
        dataset, users_map, items_map = _build_domain(
            name,
            info["prefix"],
            info["n_users"],
            info["n_items"],
            info["vision_fraction"],
            z,
            taste,
            renders,
            cfg,
            rng,
            with_features=info["with_features"],
            w_cat=w_cat,
        )
        user_latents.update(users_map)
        item_latents.update(items_map)
        if name == "source":
            source = dataset
        else:
            targets.append(dataset)

    assert source is not None
    return SyntheticWorld(source=source, targets=targets, oracle=PreferenceOracle(user_latents, item_latents))


def write_oracle(oracle: PreferenceOracle, path: str | Path, dataset: Dataset | None = None) -> None:
    """Write latent vectors as a JSON-lines sidecar, optionally restricted
    to one dataset's users and items."""
    user_ids = [u.user_id for u in dataset.users] if dataset is not None else list(oracle.user_latents)
    item_ids = list(dataset.catalog) if dataset is not None else list(oracle.item_latents)
    with open(path, "w", encoding="utf-8") as fh:
        for uid in user_ids:
            row = {"kind": "user", "id": uid, "latent": [float(x) for x in oracle.user_latents[uid]]}
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")
        for iid in item_ids:
            row = {"kind": "item", "id": iid, "latent": [float(x) for x in oracle.item_latents[iid]]}
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def load_oracle(path: str | Path) -> PreferenceOracle:
    path = str(path)
    users: dict[str, np.ndarray] = {}
    items: dict[str, np.ndarray] = {}
    for line_no, raw in enumerate(_read_text(path).splitlines(), start=1):
        if not raw.strip():
            continue
        record = _parse_line(path, line_no, raw)
        kind = record.get("kind")
        ident = record.get("id")
        latent = record.get("latent")
        if kind not in ("user", "item") or not isinstance(ident, str) or not isinstance(latent, list):
            raise MalformedRecord(path, line_no, "oracle rows need kind, id, and latent fields")
        vec = np.asarray(latent, dtype=np.float64)
        (users if kind == "user" else items)[ident] = vec
    return PreferenceOracle(users, items)
