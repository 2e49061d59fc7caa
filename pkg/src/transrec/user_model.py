"""User tower: turn a sequence of item vectors into one taste vector.

Item embeddings get learned position offsets, pass through a transformer
encoder (bidirectional, or causal when next-item pretraining needs it),
and the hidden state at the last real position summarizes the user.
Relevance between a user vector and candidate item vectors is their dot
product.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .blocks import FeatureFusion, TransformerBlock, attention_bias, init_parameters, validate_heads
from .errors import ConfigInvalid, DimMismatch, MaskShapeMismatch, SequenceTooLong


@dataclass(frozen=True)
class UserEncoderConfig:
    d_model: int
    max_positions: int
    n_layers: int = 2
    n_heads: int = 2
    ffn_mult: int = 2
    dropout: float = 0.0
    causal: bool = False

    def validate(self) -> None:
        if self.d_model < 1:
            raise ConfigInvalid("user.d_model", f"must be >= 1, got {self.d_model}")
        if self.max_positions < 1:
            raise ConfigInvalid("user.max_positions", f"must be >= 1, got {self.max_positions}")
        if self.n_layers < 1:
            raise ConfigInvalid("user.n_layers", f"must be >= 1, got {self.n_layers}")
        validate_heads(self.d_model, self.n_heads, "user.n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigInvalid("user.dropout", f"must lie in [0, 1), got {self.dropout}")


@dataclass
class UserRepresentation:
    """Hidden states for every position plus the last-real-position summary."""

    hidden: torch.Tensor  # [B, L, D]
    summary: torch.Tensor  # [B, D]
    attention: list[torch.Tensor]  # per layer, [B, H, L, L]


def add_positions(item_vecs: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """Add table[p] to position p of every sequence in [B, L, D]."""
    length = item_vecs.shape[1]
    if length > table.shape[0]:
        raise SequenceTooLong(length, int(table.shape[0]))
    if item_vecs.shape[-1] != table.shape[-1]:
        raise DimMismatch(
            f"item vectors have width {item_vecs.shape[-1]}, position table {table.shape[-1]}"
        )
    return item_vecs + table[:length][None, :, :]


class UserEncoder(nn.Module):
    def __init__(self, cfg: UserEncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.positions = nn.Embedding(cfg.max_positions, cfg.d_model)
        self.input_norm = nn.LayerNorm(cfg.d_model)
        self.layers = nn.ModuleList(
            TransformerBlock(cfg.d_model, cfg.n_heads, cfg.ffn_mult, cfg.dropout)
            for _ in range(cfg.n_layers)
        )

    def forward(
        self,
        item_vecs: torch.Tensor,
        mask: torch.Tensor,
        causal: bool | None = None,
    ) -> UserRepresentation:
        """Run [B, L, D] item vectors with a [B, L] bool mask (True = real).

        Sequences are right-padded: each row's real positions form a prefix.
        The summary is the hidden state at the last real position.
        """
        if item_vecs.ndim != 3:
            raise DimMismatch(f"expected [batch, length, d_model], got {tuple(item_vecs.shape)}")
        if mask.shape != item_vecs.shape[:2]:
            raise MaskShapeMismatch(mask.shape, item_vecs.shape[:2])
        if item_vecs.shape[-1] != self.cfg.d_model:
            raise DimMismatch(
                f"item vectors have width {item_vecs.shape[-1]}, encoder expects {self.cfg.d_model}"
            )
        lengths = mask.sum(dim=1)
        if not bool((lengths > 0).all()):
            raise MaskShapeMismatch(mask.shape, item_vecs.shape[:2])
        causal = self.cfg.causal if causal is None else causal
        x = add_positions(item_vecs, self.positions.weight)
        x = self.input_norm(x)
        bias = attention_bias(mask, causal=causal, dtype=x.dtype)
        attn_maps = []
        for layer in self.layers:
            x, weights = layer(x, bias)
            attn_maps.append(weights)
        summary = x[torch.arange(x.shape[0], device=x.device), lengths - 1]
        return UserRepresentation(hidden=x, summary=summary, attention=attn_maps)


def relevance(user_vecs: torch.Tensor, candidate_vecs: torch.Tensor) -> torch.Tensor:
    """Dot-product scores.

    [D] x [M, D] -> [M]; [B, D] x [M, D] -> [B, M]; [B, D] x [B, M, D] -> [B, M].
    """
    if user_vecs.shape[-1] != candidate_vecs.shape[-1]:
        raise DimMismatch(
            f"user width {user_vecs.shape[-1]} vs candidate width {candidate_vecs.shape[-1]}"
        )
    if user_vecs.ndim == 1 and candidate_vecs.ndim == 2:
        return candidate_vecs @ user_vecs
    if user_vecs.ndim == 2 and candidate_vecs.ndim == 2:
        return user_vecs @ candidate_vecs.T
    if user_vecs.ndim == 2 and candidate_vecs.ndim == 3:
        if user_vecs.shape[0] != candidate_vecs.shape[0]:
            raise DimMismatch(
                f"batch {user_vecs.shape[0]} vs candidate batch {candidate_vecs.shape[0]}"
            )
        return (candidate_vecs @ user_vecs[:, :, None]).squeeze(-1)
    raise DimMismatch(
        f"unsupported shapes {tuple(user_vecs.shape)} x {tuple(candidate_vecs.shape)}"
    )


def build_user_encoder(cfg: UserEncoderConfig, generator: torch.Generator) -> UserEncoder:
    encoder = UserEncoder(cfg)
    init_parameters(encoder, generator)
    return encoder


__all__ = [
    "FeatureFusion",
    "UserEncoder",
    "UserEncoderConfig",
    "UserRepresentation",
    "add_positions",
    "build_user_encoder",
    "relevance",
]
