"""Neural building blocks shared by the item and user towers.

The attention mask is additive: 0.0 where a query may attend, -inf where it
may not. Blocked keys therefore receive an attention weight of exactly 0.0,
which keeps causal outputs bitwise independent of future positions.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ConfigInvalid

NEG_INF = float("-inf")


def validate_heads(d_model: int, n_heads: int, field: str) -> None:
    if n_heads < 1:
        raise ConfigInvalid(field, f"n_heads must be >= 1, got {n_heads}")
    if d_model % n_heads != 0:
        raise ConfigInvalid(field, f"d_model={d_model} not divisible by n_heads={n_heads}")


def attention_bias(
    key_mask: torch.Tensor,
    causal: bool,
    dtype: torch.dtype,
) -> torch.Tensor:
    """Build an additive attention bias from a boolean key mask.

    Args:
        key_mask: [B, L] bool, True where the position holds real content.
        causal: if True, additionally block keys at positions after the query.

    Returns:
        [B, 1, L, L] tensor with 0.0 at allowed (query, key) pairs and -inf
        elsewhere. Padded queries keep their real keys allowed so no softmax
        row is entirely blocked.
    """
    bsz, length = key_mask.shape
    allowed = key_mask[:, None, :].expand(bsz, length, length)
    if causal:
        tri = torch.ones(length, length, dtype=torch.bool, device=key_mask.device).tril()
        allowed = allowed & tri[None, :, :]
    bias = torch.zeros(bsz, length, length, dtype=dtype, device=key_mask.device)
    bias = bias.masked_fill(~allowed, NEG_INF)
    return bias[:, None, :, :]


class MultiheadSelfAttention(nn.Module):
    """Standard scaled dot-product self-attention over packed heads."""

    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        validate_heads(d_model, n_heads, "n_heads")
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, bias: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (output [B, L, D], attention weights [B, H, L, L])."""
        bsz, length, d_model = x.shape
        qkv = self.qkv(x).view(bsz, length, 3, self.n_heads, self.head_dim)
        q, k, v = qkv.unbind(dim=2)
        q = q.transpose(1, 2)
        k = k.transpose(1, 2)
        v = v.transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores + bias
        weights = torch.softmax(scores, dim=-1)
        ctx = weights @ v
        ctx = ctx.transpose(1, 2).reshape(bsz, length, d_model)
        return self.drop(self.out(ctx)), weights


class TransformerBlock(nn.Module):
    """Post-norm transformer block: LN(x + attn), then LN(x + ffn)."""

    def __init__(self, d_model: int, n_heads: int, ffn_mult: int, dropout: float = 0.0):
        super().__init__()
        if ffn_mult < 1:
            raise ConfigInvalid("ffn_mult", f"must be >= 1, got {ffn_mult}")
        self.attn = MultiheadSelfAttention(d_model, n_heads, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.ffn = nn.Sequential(
            nn.Linear(d_model, ffn_mult * d_model),
            nn.GELU(),
            nn.Linear(ffn_mult * d_model, d_model),
        )
        self.norm2 = nn.LayerNorm(d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, bias: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        attn_out, weights = self.attn(x, bias)
        x = self.norm1(x + attn_out)
        x = self.norm2(x + self.drop(self.ffn(x)))
        return x, weights


class FeatureFusion(nn.Module):
    """Concatenate embedded categorical features onto a base vector.

    With no configured features the module is an exact identity. Otherwise
    each feature id is looked up in its own table, the lookups are appended
    to the base vector, and a linear layer projects back to d_model.
    """

    def __init__(self, d_model: int, specs: dict[str, tuple[int, int]]):
        super().__init__()
        for name, (cardinality, dim) in specs.items():
            if cardinality < 1 or dim < 1:
                raise ConfigInvalid(
                    f"features.{name}", f"cardinality and dim must be >= 1, got {(cardinality, dim)}"
                )
        self.specs = dict(specs)
        self.tables = nn.ModuleDict(
            {name: nn.Embedding(card, dim) for name, (card, dim) in specs.items()}
        )
        total = d_model + sum(dim for _, dim in specs.values())
        self.proj = nn.Linear(total, d_model) if specs else None

    def forward(self, base: torch.Tensor, feature_ids: dict[str, torch.Tensor] | None) -> torch.Tensor:
        from .errors import IndexOutOfRange, UnknownFeature

        if self.proj is None:
            if feature_ids:
                extra = sorted(feature_ids)
                raise UnknownFeature(extra[0], "feature fusion with no configured tables")
            return base
        feature_ids = feature_ids or {}
        if set(feature_ids) != set(self.specs):
            missing = sorted(set(self.specs) ^ set(feature_ids))
            raise UnknownFeature(missing[0], "feature fusion")
        parts = [base]
        for name in sorted(self.specs):
            ids = feature_ids[name]
            card = self.specs[name][0]
            if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= card):
                bad = int(ids.min()) if int(ids.min()) < 0 else int(ids.max())
                raise IndexOutOfRange(f"feature {name!r}", bad, card)
            parts.append(self.tables[name](ids))
        return self.proj(torch.cat(parts, dim=-1))


def init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Seeded default init.

    Linear and embedding weights draw from a truncated normal with std 0.02,
    convolutions use He-normal scaled to their fan-in, biases start at zero,
    and normalization gains at one.
    """
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Embedding)):
            nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04, generator=generator)
            if isinstance(m, nn.Linear) and m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            with torch.no_grad():
                m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
