"""Run configuration: INI parsing, defaults, derivation, and hashing.

Unknown sections or keys are rejected by name. The resolved config (all
defaults applied) is what gets hashed and written next to a run's outputs,
so feeding that file back reproduces the identical run. Keys that default
to ``auto`` resolve against the loaded dataset: modality encoders switch
on when the catalog contains that modality, the vision shape comes from
the first image, feature tables are sized from the data, and the position
table follows the sequence-length cap.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from pathlib import Path

import torch

from .corpus import Dataset, Modality, SyntheticWorldConfig
from .encoders import TextEncoderConfig, VisionEncoderConfig
from .errors import ConfigInvalid
from .model import ModelConfig, infer_feature_specs
from .pipeline import TrainConfig
from .precision import resolve_dtype
from .user_model import UserEncoderConfig

# section -> key -> default (all stored as strings; "auto" defers resolution)
SCHEMA: dict[str, dict[str, str]] = {
    "run": {
        "seed": "0",
        "output_dir": "runs/latest",
        "precision": "auto",
        "run_id": "auto",
    },
    "corpus": {
        "world_dir": "",
        "domain": "source",
        "catalog": "",
        "interactions": "",
        "max_seq_len": "25",
        "fraction": "1.0",
        "n_source_users": "2000",
        "n_target_users": "500",
        "n_source_items": "200",
        "n_target_items": "100",
        "latent_dim": "8",
        "text_vocab": "64",
        "text_len": "16",
        "image_shape": "1,8,8",
        "modality_mix": "0.5",
        "noise_temperature": "0.2",
        "min_stream_len": "8",
        "max_stream_len": "16",
        "text_noise": "0.1",
        "image_noise": "0.3",
        "n_categories": "6",
    },
    "encoders": {
        "d_model": "32",
        "item_encoder": "content",
        "text_enabled": "auto",
        "text_vocab_size": "64",
        "text_max_tokens": "16",
        "text_layers": "2",
        "text_heads": "2",
        "text_ffn_mult": "2",
        "text_dropout": "0.0",
        "vision_enabled": "auto",
        "vision_image_shape": "auto",
        "vision_conv_stages": "8:2,16:2",
        "vision_mlp_dims": "",
        "item_features": "auto",
    },
    "user_model": {
        "layers": "2",
        "heads": "2",
        "ffn_mult": "2",
        "dropout": "0.0",
        "max_positions": "0",
        "user_features": "auto",
    },
    "objectives": {
        "n_future": "2",
        "n_negatives": "4",
        "head_relu": "true",
    },
    "pipeline": {
        "learning_rate": "0.001",
        "batch_size": "64",
        "max_epochs": "30",
        "patience": "5",
        "grad_clip": "5.0",
        "stage1_train_items": "true",
    },
    "eval": {
        "k": "10",
        "mask_history": "false",
        "sampled_candidates": "0",
    },
}

_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


class RunConfig:
    def __init__(self, values: dict[str, dict[str, str]]):
        self.values = values

    # -- raw typed access -------------------------------------------------

    def raw(self, section: str, key: str) -> str:
        return self.values[section][key]

    def _int(self, section: str, key: str) -> int:
        raw = self.raw(section, key)
        try:
            return int(raw)
        except ValueError:
            raise ConfigInvalid(f"{section}.{key}", f"expected an integer, got {raw!r}") from None

    def _float(self, section: str, key: str) -> float:
        raw = self.raw(section, key)
        try:
            return float(raw)
        except ValueError:
            raise ConfigInvalid(f"{section}.{key}", f"expected a number, got {raw!r}") from None

    def _bool(self, section: str, key: str) -> bool:
        raw = self.raw(section, key).lower()
        if raw not in _BOOL:
            raise ConfigInvalid(f"{section}.{key}", f"expected a boolean, got {raw!r}")
        return _BOOL[raw]

    def _shape(self, section: str, key: str) -> tuple[int, int, int]:
        raw = self.raw(section, key)
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if len(parts) != 3 or not all(p.isdigit() for p in parts):
            raise ConfigInvalid(
                f"{section}.{key}", f"expected channels,height,width, got {raw!r}"
            )
        return (int(parts[0]), int(parts[1]), int(parts[2]))

    def _stages(self, section: str, key: str) -> tuple[tuple[int, int], ...]:
        raw = self.raw(section, key)
        stages = []
        for chunk in raw.split(","):
            chunk = chunk.strip()
            if not chunk:
                continue
            bits = chunk.split(":")
            if len(bits) != 2 or not all(b.strip().isdigit() for b in bits):
                raise ConfigInvalid(
                    f"{section}.{key}", f"expected channels:stride pairs, got {raw!r}"
                )
            stages.append((int(bits[0]), int(bits[1])))
        if not stages:
            raise ConfigInvalid(f"{section}.{key}", "needs at least one conv stage")
        return tuple(stages)

    def _dims(self, section: str, key: str) -> tuple[int, ...]:
        raw = self.raw(section, key)
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if not all(p.isdigit() for p in parts):
            raise ConfigInvalid(f"{section}.{key}", f"expected comma-separated sizes, got {raw!r}")
        return tuple(int(p) for p in parts)

    def _specs(self, section: str, key: str) -> dict[str, tuple[int, int]] | None:
        """Feature specs: 'auto', 'none', or name:cardinality:dim pairs."""
        raw = self.raw(section, key).strip()
        if raw.lower() == "auto":
            return None
        if raw.lower() in ("none", ""):
            return {}
        specs: dict[str, tuple[int, int]] = {}
        for chunk in raw.split(","):
            chunk = chunk.strip()
            if not chunk:
                continue
            bits = chunk.split(":")
            if len(bits) != 3 or not bits[1].strip().isdigit() or not bits[2].strip().isdigit():
                raise ConfigInvalid(
                    f"{section}.{key}",
                    f"expected name:cardinality:dim entries, got {chunk!r}",
                )
            specs[bits[0].strip()] = (int(bits[1]), int(bits[2]))
        return specs

    # -- run --------------------------------------------------------------

    @property
    def seed(self) -> int:
        return self._int("run", "seed")

    @property
    def output_dir(self) -> Path:
        return Path(self.raw("run", "output_dir"))

    @property
    def run_id(self) -> str:
        raw = self.raw("run", "run_id")
        return self.output_dir.name if raw == "auto" else raw

    def dtype(self) -> torch.dtype:
        raw = self.raw("run", "precision")
        return resolve_dtype(None if raw == "auto" else raw)

    # -- corpus -----------------------------------------------------------

    @property
    def max_seq_len(self) -> int:
        return self._int("corpus", "max_seq_len")

    @property
    def fraction(self) -> float:
        return self._float("corpus", "fraction")

    @property
    def domain(self) -> str:
        return self.raw("corpus", "domain")

    def data_paths(self) -> tuple[Path, Path] | None:
        """Explicit catalog/interaction files, a world-dir domain, or None."""
        catalog = self.raw("corpus", "catalog")
        interactions = self.raw("corpus", "interactions")
        if catalog and interactions:
            return Path(catalog), Path(interactions)
        if catalog or interactions:
            raise ConfigInvalid(
                "corpus.catalog", "catalog and interactions must be set together"
            )
        world_dir = self.raw("corpus", "world_dir")
        if world_dir:
            base = Path(world_dir) / self.domain
            return base / "catalog.jsonl", base / "interactions.jsonl"
        return None

    def synthetic_config(self) -> SyntheticWorldConfig:
        cfg = SyntheticWorldConfig(
            n_source_users=self._int("corpus", "n_source_users"),
            n_target_users=self._int("corpus", "n_target_users"),
            n_source_items=self._int("corpus", "n_source_items"),
            n_target_items=self._int("corpus", "n_target_items"),
            latent_dim=self._int("corpus", "latent_dim"),
            text_vocab=self._int("corpus", "text_vocab"),
            text_len=self._int("corpus", "text_len"),
            image_shape=self._shape("corpus", "image_shape"),
            modality_mix=self._float("corpus", "modality_mix"),
            noise_temperature=self._float("corpus", "noise_temperature"),
            seed=self.seed,
            min_stream_len=self._int("corpus", "min_stream_len"),
            max_stream_len=self._int("corpus", "max_stream_len"),
            max_seq_len=self.max_seq_len,
            text_noise=self._float("corpus", "text_noise"),
            image_noise=self._float("corpus", "image_noise"),
            n_categories=self._int("corpus", "n_categories"),
        )
        cfg.validate()
        return cfg

    # -- model ------------------------------------------------------------

    def _auto_enabled(self, key: str, dataset: Dataset, modality: Modality) -> bool:
        raw = self.raw("encoders", key).lower()
        if raw == "auto":
            return any(item.modality is modality for item in dataset.catalog.values())
        if raw not in _BOOL:
            raise ConfigInvalid(f"encoders.{key}", f"expected auto or a boolean, got {raw!r}")
        return _BOOL[raw]

    def _auto_item_features(self, dataset: Dataset, d_model: int) -> dict[str, tuple[int, int]]:
        specs = self._specs("encoders", "item_features")
        if specs is not None:
            return specs
        return infer_feature_specs((item.features for item in dataset.catalog.values()), d_model)

    def _auto_user_features(self, dataset: Dataset, d_model: int) -> dict[str, tuple[int, int]]:
        specs = self._specs("user_model", "user_features")
        if specs is not None:
            return specs
        return infer_feature_specs((user.features for user in dataset.users), d_model)

    def model_config(self, dataset: Dataset) -> ModelConfig:
        d_model = self._int("encoders", "d_model")
        kind = self.raw("encoders", "item_encoder")
        if kind not in ("content", "id"):
            raise ConfigInvalid("encoders.item_encoder", f"must be content or id, got {kind!r}")

        text_cfg = None
        vision_cfg = None
        if kind == "content":
            if self._auto_enabled("text_enabled", dataset, Modality.TEXT):
                text_cfg = TextEncoderConfig(
                    vocab_size=self._int("encoders", "text_vocab_size"),
                    max_tokens=self._int("encoders", "text_max_tokens"),
                    d_model=d_model,
                    n_layers=self._int("encoders", "text_layers"),
                    n_heads=self._int("encoders", "text_heads"),
                    ffn_mult=self._int("encoders", "text_ffn_mult"),
                    dropout=self._float("encoders", "text_dropout"),
                )
            if self._auto_enabled("vision_enabled", dataset, Modality.VISION):
                raw_shape = self.raw("encoders", "vision_image_shape")
                if raw_shape == "auto":
                    shape = None
                    for item in dataset.catalog.values():
                        if item.modality is Modality.VISION and item.image is not None:
                            shape = tuple(item.image.shape)
                            break
                    if shape is None:
                        raise ConfigInvalid(
                            "encoders.vision_image_shape",
                            "auto needs at least one vision item in the catalog",
                        )
                else:
                    shape = self._shape("encoders", "vision_image_shape")
                mlp = self._dims("encoders", "vision_mlp_dims")
                vision_cfg = VisionEncoderConfig(
                    in_channels=shape[0],
                    image_h=shape[1],
                    image_w=shape[2],
                    d_model=d_model,
                    conv_stages=self._stages("encoders", "vision_conv_stages"),
                    mlp_dims=mlp,
                )

        max_positions = self._int("user_model", "max_positions")
        if max_positions == 0:
            max_positions = dataset.max_seq_len
        user_cfg = UserEncoderConfig(
            d_model=d_model,
            max_positions=max_positions,
            n_layers=self._int("user_model", "layers"),
            n_heads=self._int("user_model", "heads"),
            ffn_mult=self._int("user_model", "ffn_mult"),
            dropout=self._float("user_model", "dropout"),
        )
        cfg = ModelConfig(
            d_model=d_model,
            user=user_cfg,
            item_encoder=kind,
            text=text_cfg,
            vision=vision_cfg,
            item_features=self._auto_item_features(dataset, d_model),
            user_features=self._auto_user_features(dataset, d_model),
        )
        cfg.validate()
        if text_cfg is not None:
            text_cfg.validate()
        if vision_cfg is not None:
            vision_cfg.validate()
        user_cfg.validate()
        return cfg

    # -- training and eval --------------------------------------------------

    def train_config(self) -> TrainConfig:
        cfg = TrainConfig(
            learning_rate=self._float("pipeline", "learning_rate"),
            batch_size=self._int("pipeline", "batch_size"),
            max_epochs=self._int("pipeline", "max_epochs"),
            patience=self._int("pipeline", "patience"),
            grad_clip=self._float("pipeline", "grad_clip"),
            n_future=self._int("objectives", "n_future"),
            n_negatives=self._int("objectives", "n_negatives"),
            head_relu=self._bool("objectives", "head_relu"),
            stage1_train_items=self._bool("pipeline", "stage1_train_items"),
            valid_k=self._int("eval", "k"),
        )
        cfg.validate()
        return cfg

    @property
    def eval_k(self) -> int:
        return self._int("eval", "k")

    @property
    def mask_history(self) -> bool:
        return self._bool("eval", "mask_history")

    @property
    def sampled_candidates(self) -> int:
        return self._int("eval", "sampled_candidates")

    # -- serialization ------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for section in SCHEMA:
            lines.append(f"[{section}]")
            for key in SCHEMA[section]:
                lines.append(f"{key} = {self.values[section][key]}")
            lines.append("")
        return "\n".join(lines)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def load_run_config(
    path: str | Path | None = None,
    overrides: dict[tuple[str, str], str] | None = None,
) -> RunConfig:
    """Parse an INI file over the schema defaults, then apply CLI overrides.

    Any section or key outside the schema is an error naming the offender.
    """
    values = {section: dict(keys) for section, keys in SCHEMA.items()}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigInvalid("config", f"file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigInvalid("config", f"cannot parse {path}: {exc}") from exc
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigInvalid(section, "unknown config section")
            for key, value in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigInvalid(f"{section}.{key}", "unknown config key")
                values[section][key] = value.strip()
    for (section, key), value in (overrides or {}).items():
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigInvalid(f"{section}.{key}", "unknown config key")
        values[section][key] = value
    return RunConfig(values)
