"""Item tower: per-modality content encoders and the dispatch layer.

Text runs through a small transformer with attention pooling, images
through a residual convolution stack with global average pooling and an
MLP head, and bare ids through an embedding table. A mixed batch is split
by modality, encoded per modality, and scattered back into input order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .blocks import FeatureFusion, TransformerBlock, attention_bias, init_parameters, validate_heads
from .corpus import Dataset, Modality
from .errors import (
    BadImageShape,
    ConfigInvalid,
    EmptyTokenList,
    IndexOutOfRange,
    SequenceTooLong,
    TokenOutOfRange,
    UnconfiguredModality,
    UnencodableItem,
)


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int
    max_tokens: int
    d_model: int
    n_layers: int = 2
    n_heads: int = 2
    ffn_mult: int = 2
    dropout: float = 0.0

    def validate(self) -> None:
        if self.vocab_size < 1:
            raise ConfigInvalid("text.vocab_size", f"must be >= 1, got {self.vocab_size}")
        if self.max_tokens < 1:
            raise ConfigInvalid("text.max_tokens", f"must be >= 1, got {self.max_tokens}")
        if self.d_model < 1:
            raise ConfigInvalid("text.d_model", f"must be >= 1, got {self.d_model}")
        if self.n_layers < 1:
            raise ConfigInvalid("text.n_layers", f"must be >= 1, got {self.n_layers}")
        validate_heads(self.d_model, self.n_heads, "text.n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigInvalid("text.dropout", f"must lie in [0, 1), got {self.dropout}")


@dataclass(frozen=True)
class VisionEncoderConfig:
    in_channels: int
    image_h: int
    image_w: int
    d_model: int
    conv_stages: tuple[tuple[int, int], ...] = ((8, 2), (16, 2))  # (out_channels, stride)
    mlp_dims: tuple[int, ...] = ()  # defaults to (2 * d_model, d_model)

    def resolved_mlp(self) -> tuple[int, ...]:
        return self.mlp_dims if self.mlp_dims else (2 * self.d_model, self.d_model)

    def validate(self) -> None:
        if self.in_channels < 1 or self.image_h < 1 or self.image_w < 1:
            raise ConfigInvalid(
                "vision.image_shape",
                f"channels/height/width must be >= 1, got "
                f"({self.in_channels}, {self.image_h}, {self.image_w})",
            )
        if self.d_model < 1:
            raise ConfigInvalid("vision.d_model", f"must be >= 1, got {self.d_model}")
        if not self.conv_stages:
            raise ConfigInvalid("vision.conv_stages", "needs at least one stage")
        height, width = self.image_h, self.image_w
        for idx, (out_ch, stride) in enumerate(self.conv_stages):
            if out_ch < 1 or stride < 1:
                raise ConfigInvalid(
                    "vision.conv_stages", f"stage {idx} has non-positive size {(out_ch, stride)}"
                )
            height = -(-height // stride)
            width = -(-width // stride)
        if height < 1 or width < 1:
            raise ConfigInvalid(
                "vision.conv_stages",
                f"spatial extent collapses to {height}x{width} after the conv stack",
            )
        mlp = self.resolved_mlp()
        if mlp[-1] != self.d_model:
            raise ConfigInvalid(
                "vision.mlp_dims", f"last dim must equal d_model={self.d_model}, got {mlp[-1]}"
            )


@dataclass(frozen=True)
class IdEncoderConfig:
    n_items: int
    d_model: int

    def validate(self) -> None:
        if self.n_items < 1:
            raise ConfigInvalid("id.n_items", f"must be >= 1, got {self.n_items}")
        if self.d_model < 1:
            raise ConfigInvalid("id.d_model", f"must be >= 1, got {self.d_model}")


class TextEncoder(nn.Module):
    """Token embeddings plus positions, transformer layers, and a learned
    attention pooling that turns the hidden states into one item vector."""

    def __init__(self, cfg: TextEncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.token_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_tokens, cfg.d_model)
        self.input_norm = nn.LayerNorm(cfg.d_model)
        self.layers = nn.ModuleList(
            TransformerBlock(cfg.d_model, cfg.n_heads, cfg.ffn_mult, cfg.dropout)
            for _ in range(cfg.n_layers)
        )
        self.pool_score = nn.Linear(cfg.d_model, 1, bias=False)
        self.out_proj = nn.Linear(cfg.d_model, cfg.d_model)

    def forward(
        self,
        tokens: torch.Tensor,
        mask: torch.Tensor,
        *,
        return_pool_weights: bool = False,
    ):
        """Encode a [B, K] batch of token ids with a [B, K] bool mask.

        Returns [B, d_model], or a (vectors, pool_weights) pair when asked.
        """
        if tokens.ndim != 2 or tokens.shape[1] == 0:
            raise EmptyTokenList()
        if not bool(mask.any(dim=1).all()):
            raise EmptyTokenList("a row in the batch has no real tokens")
        if tokens.numel():
            lo, hi = int(tokens.min()), int(tokens.max())
            if lo < 0 or hi >= self.cfg.vocab_size:
                bad = lo if lo < 0 else hi
                raise TokenOutOfRange("<batch>", bad, self.cfg.vocab_size)
        length = tokens.shape[1]
        if length > self.cfg.max_tokens:
            raise SequenceTooLong(length, self.cfg.max_tokens)
        dtype = self.token_emb.weight.dtype
        pos = torch.arange(length, device=tokens.device)
        x = self.input_norm(self.token_emb(tokens) + self.pos_emb(pos)[None, :, :])
        bias = attention_bias(mask, causal=False, dtype=dtype)
        for layer in self.layers:
            x, _ = layer(x, bias)
        scores = self.pool_score(x).squeeze(-1)
        scores = scores.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        pooled = (weights[:, :, None] * x).sum(dim=1)
        out = self.out_proj(pooled)
        if return_pool_weights:
            return out, weights
        return out


class ResidualConvBlock(nn.Module):
    """3x3 conv pair with a skip path; no normalization layers, so an
    all-zero input with zero biases stays exactly zero."""

    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1)
        if stride != 1 or in_ch != out_ch:
            self.skip: nn.Module = nn.Conv2d(in_ch, out_ch, 1, stride=stride)
        else:
            self.skip = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.conv1(x))
        h = self.conv2(h)
        return torch.relu(h + self.skip(x))


def global_average_pool(feature_map: torch.Tensor) -> torch.Tensor:
    """Mean over the spatial grid: [B, C, H, W] -> [B, C]."""
    return feature_map.mean(dim=(2, 3))


class VisionEncoder(nn.Module):
    def __init__(self, cfg: VisionEncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        stages = []
        in_ch = cfg.in_channels
        for out_ch, stride in cfg.conv_stages:
            stages.append(ResidualConvBlock(in_ch, out_ch, stride))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        mlp_dims = cfg.resolved_mlp()
        layers: list[nn.Module] = []
        prev = in_ch
        for i, dim in enumerate(mlp_dims):
            layers.append(nn.Linear(prev, dim))
            if i < len(mlp_dims) - 1:
                layers.append(nn.ReLU())
            prev = dim
        self.mlp = nn.Sequential(*layers)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        """Encode [B, C, H, W] pixel grids (0..255) into [B, d_model]."""
        expected = (self.cfg.in_channels, self.cfg.image_h, self.cfg.image_w)
        if pixels.ndim != 4 or tuple(pixels.shape[1:]) != expected:
            raise BadImageShape("<batch>", tuple(pixels.shape[1:]), expected)
        dtype = self.mlp[0].weight.dtype
        x = pixels.to(dtype) / 127.5 - 1.0
        for stage in self.stages:
            x = stage(x)
        return self.mlp(global_average_pool(x))


class IdEncoder(nn.Module):
    def __init__(self, cfg: IdEncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.table = nn.Embedding(cfg.n_items, cfg.d_model)

    def forward(self, indices: torch.Tensor) -> torch.Tensor:
        if indices.numel():
            lo, hi = int(indices.min()), int(indices.max())
            if lo < 0 or hi >= self.cfg.n_items:
                raise IndexOutOfRange("item", lo if lo < 0 else hi, self.cfg.n_items)
        return self.table(indices)


@dataclass
class ItemBatch:
    """Unique items of one batch, grouped by modality.

    ``*_slots`` give each group's destination rows in the [n, d] output so
    dispatch preserves the caller's item order.
    """

    n: int
    text_tokens: torch.Tensor | None = None
    text_mask: torch.Tensor | None = None
    text_slots: torch.Tensor | None = None
    images: torch.Tensor | None = None
    vision_slots: torch.Tensor | None = None
    id_indices: torch.Tensor | None = None
    id_slots: torch.Tensor | None = None
    feature_ids: dict[str, torch.Tensor] = field(default_factory=dict)


class CatalogTensors:
    """Catalog content packed into tensors, addressed by dense item index."""

    def __init__(self, dataset: Dataset):
        self.n_items = dataset.n_items
        self.modality = np.empty(self.n_items, dtype=object)

        text_rows: list[tuple[int, tuple[int, ...]]] = []
        vision_rows: list[tuple[int, np.ndarray]] = []
        feature_names: set[str] = set()
        for idx, item in enumerate(dataset.catalog.values()):
            self.modality[idx] = item.modality
            if item.modality is Modality.TEXT:
                if not item.text_tokens:
                    raise UnencodableItem(item.item_id, "text item with no tokens")
                text_rows.append((idx, item.text_tokens))
            elif item.modality is Modality.VISION:
                if item.image is None:
                    raise UnencodableItem(item.item_id, "vision item with no image")
                vision_rows.append((idx, item.image))
            if item.features:
                feature_names.update(item.features)

        self.row_of = np.full(self.n_items, -1, dtype=np.int64)

        if text_rows:
            max_len = max(len(tokens) for _, tokens in text_rows)
            tokens = torch.zeros(len(text_rows), max_len, dtype=torch.long)
            mask = torch.zeros(len(text_rows), max_len, dtype=torch.bool)
            for row, (idx, toks) in enumerate(text_rows):
                tokens[row, : len(toks)] = torch.tensor(toks, dtype=torch.long)
                mask[row, : len(toks)] = True
                self.row_of[idx] = row
            self.text_tokens: torch.Tensor | None = tokens
            self.text_mask: torch.Tensor | None = mask
        else:
            self.text_tokens = None
            self.text_mask = None

        if vision_rows:
            shapes = {tuple(img.shape) for _, img in vision_rows}
            if len(shapes) != 1:
                raise BadImageShape("<catalog>", sorted(shapes)[1], sorted(shapes)[0])
            stack = np.stack([img for _, img in vision_rows])
            for row, (idx, _) in enumerate(vision_rows):
                self.row_of[idx] = row
            self.images: torch.Tensor | None = torch.from_numpy(stack)
        else:
            self.images = None

        self.feature_ids: dict[str, torch.Tensor] = {}
        for name in sorted(feature_names):
            column = torch.zeros(self.n_items, dtype=torch.long)
            for idx, item in enumerate(dataset.catalog.values()):
                if not item.features or name not in item.features:
                    raise UnencodableItem(
                        item.item_id, f"feature {name!r} present on some items but not this one"
                    )
                column[idx] = item.features[name]
            self.feature_ids[name] = column

    def gather(self, indices: torch.Tensor) -> ItemBatch:
        """Group a [n] index tensor by modality for the item tower."""
        batch = ItemBatch(n=int(indices.shape[0]))
        if batch.n == 0:
            return batch
        idx_np = indices.numpy()
        if idx_np.min() < 0 or idx_np.max() >= self.n_items:
            bad = int(idx_np.min()) if idx_np.min() < 0 else int(idx_np.max())
            raise IndexOutOfRange("item", bad, self.n_items)

        slots_by_modality: dict[Modality, list[int]] = {m: [] for m in Modality}
        for slot, idx in enumerate(idx_np):
            slots_by_modality[self.modality[idx]].append(slot)

        text_slots = slots_by_modality[Modality.TEXT]
        if text_slots:
            rows = torch.from_numpy(self.row_of[idx_np[text_slots]])
            batch.text_tokens = self.text_tokens[rows]
            batch.text_mask = self.text_mask[rows]
            batch.text_slots = torch.tensor(text_slots, dtype=torch.long)
        vision_slots = slots_by_modality[Modality.VISION]
        if vision_slots:
            rows = torch.from_numpy(self.row_of[idx_np[vision_slots]])
            batch.images = self.images[rows]
            batch.vision_slots = torch.tensor(vision_slots, dtype=torch.long)
        id_slots = slots_by_modality[Modality.ID]
        if id_slots:
            batch.id_indices = torch.from_numpy(idx_np[id_slots])
            batch.id_slots = torch.tensor(id_slots, dtype=torch.long)

        for name, column in self.feature_ids.items():
            batch.feature_ids[name] = column[indices]
        return batch

    def gather_all_as_ids(self, indices: torch.Tensor) -> ItemBatch:
        """Ignore content and present every item as a bare id (for the
        id-embedding baseline)."""
        batch = ItemBatch(n=int(indices.shape[0]))
        if batch.n == 0:
            return batch
        if int(indices.min()) < 0 or int(indices.max()) >= self.n_items:
            bad = int(indices.min()) if int(indices.min()) < 0 else int(indices.max())
            raise IndexOutOfRange("item", bad, self.n_items)
        batch.id_indices = indices.clone()
        batch.id_slots = torch.arange(batch.n, dtype=torch.long)
        for name, column in self.feature_ids.items():
            batch.feature_ids[name] = column[indices]
        return batch


class ItemTower(nn.Module):
    """Dispatch a mixed-modality batch to its encoders and fuse features.

    Parameters under ``encoders`` are the transfer-frozen set; the feature
    tables and projection under ``features`` stay trainable in every mode.
    """

    def __init__(
        self,
        d_model: int,
        text_cfg: TextEncoderConfig | None,
        vision_cfg: VisionEncoderConfig | None,
        id_cfg: IdEncoderConfig | None,
        feature_specs: dict[str, tuple[int, int]] | None = None,
    ):
        super().__init__()
        encoders: dict[str, nn.Module] = {}
        if text_cfg is not None:
            if text_cfg.d_model != d_model:
                raise ConfigInvalid("text.d_model", f"must equal d_model={d_model}")
            encoders["text"] = TextEncoder(text_cfg)
        if vision_cfg is not None:
            if vision_cfg.d_model != d_model:
                raise ConfigInvalid("vision.d_model", f"must equal d_model={d_model}")
            encoders["vision"] = VisionEncoder(vision_cfg)
        if id_cfg is not None:
            if id_cfg.d_model != d_model:
                raise ConfigInvalid("id.d_model", f"must equal d_model={d_model}")
            encoders["id"] = IdEncoder(id_cfg)
        if not encoders:
            raise ConfigInvalid("encoders", "at least one item encoder must be configured")
        self.d_model = d_model
        self.encoders = nn.ModuleDict(encoders)
        self.features = FeatureFusion(d_model, feature_specs or {})

    def _require(self, modality: str) -> nn.Module:
        if modality not in self.encoders:
            raise UnconfiguredModality(modality)
        return self.encoders[modality]

    def forward(self, batch: ItemBatch, *, frozen: bool = False) -> torch.Tensor:
        """Encode one ItemBatch into [n, d_model] in slot order.

        With ``frozen=True`` the modality encoders run without gradient
        tracking; feature fusion still trains.
        """
        param = next(self.parameters())
        out = torch.zeros(batch.n, self.d_model, dtype=param.dtype, device=param.device)

        def encode() -> list[tuple[torch.Tensor, torch.Tensor]]:
            parts = []
            if batch.text_slots is not None:
                enc = self._require("text")
                parts.append((batch.text_slots, enc(batch.text_tokens, batch.text_mask)))
            if batch.vision_slots is not None:
                enc = self._require("vision")
                parts.append((batch.vision_slots, enc(batch.images)))
            if batch.id_slots is not None:
                enc = self._require("id")
                parts.append((batch.id_slots, enc(batch.id_indices)))
            return parts

        if frozen:
            with torch.no_grad():
                parts = encode()
        else:
            parts = encode()
        for slots, vectors in parts:
            out = out.index_copy(0, slots, vectors)
        return self.features(out, batch.feature_ids if self.features.specs else None)


def build_item_tower(
    d_model: int,
    text_cfg: TextEncoderConfig | None,
    vision_cfg: VisionEncoderConfig | None,
    id_cfg: IdEncoderConfig | None,
    feature_specs: dict[str, tuple[int, int]] | None,
    generator: torch.Generator,
) -> ItemTower:
    tower = ItemTower(d_model, text_cfg, vision_cfg, id_cfg, feature_specs)
    init_parameters(tower, generator)
    return tower
