"""The assembled two-tower model and its architecture fingerprint.

The fingerprint hashes only the fields that fix the shared-tensor shapes
(widths, layer counts, conv stages), not domain-bound ones such as catalog
size, feature vocabularies, or image resolution. Checkpoints store it so a
load into a structurally different model fails loudly instead of silently
reinterpreting tensors.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable

import torch
from torch import nn

from .blocks import FeatureFusion, init_parameters
from .encoders import (
    IdEncoderConfig,
    ItemBatch,
    ItemTower,
    TextEncoderConfig,
    VisionEncoderConfig,
)
from .errors import ConfigInvalid
from .user_model import UserEncoder, UserEncoderConfig, UserRepresentation

CONTENT = "content"
ID_ONLY = "id"


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    user: UserEncoderConfig
    item_encoder: str = CONTENT
    text: TextEncoderConfig | None = None
    vision: VisionEncoderConfig | None = None
    item_features: dict[str, tuple[int, int]] = field(default_factory=dict)
    user_features: dict[str, tuple[int, int]] = field(default_factory=dict)

    def validate(self) -> None:
        if self.d_model < 1:
            raise ConfigInvalid("d_model", f"must be >= 1, got {self.d_model}")
        if self.item_encoder not in (CONTENT, ID_ONLY):
            raise ConfigInvalid(
                "item_encoder", f"must be {CONTENT!r} or {ID_ONLY!r}, got {self.item_encoder!r}"
            )
        if self.item_encoder == CONTENT and self.text is None and self.vision is None:
            raise ConfigInvalid("item_encoder", "content model needs a text or vision encoder")
        if self.user.d_model != self.d_model:
            raise ConfigInvalid("user.d_model", f"must equal d_model={self.d_model}")


def infer_feature_specs(
    feature_maps: Iterable[dict[str, int] | None], d_model: int
) -> dict[str, tuple[int, int]]:
    """Embedding (cardinality, dim) per feature name from observed ids."""
    maxima: dict[str, int] = {}
    for mapping in feature_maps:
        for name, value in (mapping or {}).items():
            maxima[name] = max(maxima.get(name, 0), value)
    dim = max(4, d_model // 8)
    return {name: (top + 1, dim) for name, top in sorted(maxima.items())}


def arch_hash(cfg: ModelConfig) -> str:
    """Hash of the architecture-determining config fields."""
    parts = [f"d_model={cfg.d_model}", f"item_encoder={cfg.item_encoder}"]
    if cfg.text is not None:
        t = cfg.text
        parts.append(
            "text="
            f"{t.vocab_size},{t.max_tokens},{t.n_layers},{t.n_heads},{t.ffn_mult}"
        )
    if cfg.vision is not None:
        v = cfg.vision
        stages = ";".join(f"{c}:{s}" for c, s in v.conv_stages)
        mlp = ";".join(str(d) for d in v.resolved_mlp())
        parts.append(f"vision={v.in_channels},{stages},{mlp}")
    u = cfg.user
    parts.append(f"user={u.n_layers},{u.n_heads},{u.ffn_mult}")
    return hashlib.sha256("\n".join(parts).encode()).hexdigest()[:16]


class TransRecModel(nn.Module):
    """Item tower, user tower, user-side feature fusion, and the next-item
    softmax head used only during source pretraining."""

    def __init__(self, cfg: ModelConfig, n_items: int, dtype: torch.dtype, seed: int):
        super().__init__()
        cfg.validate()
        if n_items < 1:
            raise ConfigInvalid("n_items", f"must be >= 1, got {n_items}")
        self.cfg = cfg
        self.n_items = n_items
        if cfg.item_encoder == ID_ONLY:
            self.item_tower = ItemTower(
                cfg.d_model, None, None, IdEncoderConfig(n_items, cfg.d_model), cfg.item_features
            )
        else:
            self.item_tower = ItemTower(cfg.d_model, cfg.text, cfg.vision, None, cfg.item_features)
        self.user_encoder = UserEncoder(cfg.user)
        self.user_features = FeatureFusion(cfg.d_model, cfg.user_features)
        self.softmax_head = nn.Linear(cfg.d_model, n_items)
        generator = torch.Generator().manual_seed(seed)
        init_parameters(self, generator)
        self.to(dtype)

    @property
    def arch_hash(self) -> str:
        return arch_hash(self.cfg)

    @property
    def dtype(self) -> torch.dtype:
        return self.softmax_head.weight.dtype

    def encode_items(self, batch: ItemBatch, *, frozen: bool = False) -> torch.Tensor:
        return self.item_tower(batch, frozen=frozen)

    def encode_users(
        self,
        item_vecs: torch.Tensor,
        mask: torch.Tensor,
        *,
        causal: bool = False,
        user_feature_ids: dict[str, torch.Tensor] | None = None,
    ) -> UserRepresentation:
        rep = self.user_encoder(item_vecs, mask, causal=causal)
        if self.user_features.specs:
            rep.summary = self.user_features(rep.summary, user_feature_ids)
        return rep

    def encoder_param_names(self) -> list[str]:
        """Names of the transfer-frozen set: everything under the modality
        encoders of the item tower."""
        return [
            name for name, _ in self.named_parameters() if name.startswith("item_tower.encoders.")
        ]
