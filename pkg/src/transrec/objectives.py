"""Training objectives and the batch assembly that feeds them.

Source pretraining predicts the next item with a softmax over the full
catalog. Downstream training splits each sequence into a context and its
last few items, scores those targets and a handful of sampled negatives
against the user vector, and applies a binary cross-entropy loss in its
numerically safe log-sigmoid form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, TypeVar

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CatalogExhausted, ConfigInvalid, DimMismatch, LabelOutOfRange, SequenceTooShort

T = TypeVar("T")


@dataclass
class LossOutput:
    """``objective`` is the scalar to backpropagate (sum over the batch
    divided by the number of users); ``per_term`` is the reported value,
    normalized by labeled positions for next-item prediction and by users
    for the contrastive objective."""

    objective: torch.Tensor
    per_term: float
    n_terms: int


def split_context_target(items: Sequence[T], n_future: int) -> tuple[list[T], list[T]]:
    """Split off the last ``n_future`` elements as prediction targets."""
    if n_future < 1:
        raise ConfigInvalid("n_future", f"must be >= 1, got {n_future}")
    if len(items) < n_future + 1:
        raise SequenceTooShort(
            f"sequence of length {len(items)} cannot yield {n_future} targets plus context"
        )
    split = len(items) - n_future
    return list(items[:split]), list(items[split:])


def sample_negatives(
    user_items: Sequence[int],
    catalog_size: int,
    n_negatives: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Uniform sample of catalog indices outside the user's history,
    without replacement."""
    if n_negatives < 1:
        raise ConfigInvalid("n_negatives", f"must be >= 1, got {n_negatives}")
    exclude = np.zeros(catalog_size, dtype=bool)
    seen = np.asarray(list(user_items), dtype=np.int64)
    if seen.size:
        if seen.min() < 0 or seen.max() >= catalog_size:
            raise ConfigInvalid(
                "user_items", f"history index outside [0, {catalog_size})"
            )
        exclude[seen] = True
    eligible = np.flatnonzero(~exclude)
    if eligible.size < n_negatives:
        raise CatalogExhausted(n_negatives, int(eligible.size))
    return rng.choice(eligible, size=n_negatives, replace=False)


def pad_index_sequences(
    seqs: Sequence[Sequence[int]], pad_value: int = 0
) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad integer sequences into a [B, L] tensor plus bool mask."""
    if not seqs:
        raise SequenceTooShort("cannot pad an empty batch")
    max_len = max(len(s) for s in seqs)
    if max_len == 0:
        raise SequenceTooShort("cannot pad a batch of empty sequences")
    out = torch.full((len(seqs), max_len), pad_value, dtype=torch.long)
    mask = torch.zeros(len(seqs), max_len, dtype=torch.bool)
    for row, seq in enumerate(seqs):
        if seq:
            out[row, : len(seq)] = torch.tensor(list(seq), dtype=torch.long)
            mask[row, : len(seq)] = True
    return out, mask


def next_item_loss(
    hidden: torch.Tensor,
    labels: torch.Tensor,
    label_mask: torch.Tensor,
    head: torch.nn.Module,
    *,
    apply_relu: bool = True,
) -> LossOutput:
    """Full-catalog softmax cross-entropy at every labeled position.

    ``hidden`` is [B, L, D] from the causal user encoder; position t is
    trained to name the item at t+1. The head's logits optionally pass
    through a ReLU before the softmax (the historical form; disable via
    ``apply_relu=False``).
    """
    if hidden.ndim != 3:
        raise DimMismatch(f"expected [batch, length, d_model] hidden states, got {tuple(hidden.shape)}")
    if labels.shape != hidden.shape[:2] or label_mask.shape != labels.shape:
        raise DimMismatch(
            f"labels {tuple(labels.shape)} and mask {tuple(label_mask.shape)} must both be "
            f"{tuple(hidden.shape[:2])}"
        )
    logits = head(hidden)
    n_classes = logits.shape[-1]
    real_labels = labels[label_mask]
    if real_labels.numel() == 0:
        raise SequenceTooShort("no labeled positions in the batch")
    lo, hi = int(real_labels.min()), int(real_labels.max())
    if lo < 0 or hi >= n_classes:
        raise LabelOutOfRange(lo if lo < 0 else hi, n_classes)
    if apply_relu:
        logits = torch.relu(logits)
    log_probs = F.log_softmax(logits, dim=-1)
    picked = log_probs.gather(-1, labels.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    loss_sum = -(picked * label_mask.to(picked.dtype)).sum()
    n_terms = int(label_mask.sum())
    batch = hidden.shape[0]
    return LossOutput(
        objective=loss_sum / batch,
        per_term=float(loss_sum.detach()) / n_terms,
        n_terms=n_terms,
    )


def contrastive_loss(pos_scores: torch.Tensor, neg_scores: torch.Tensor) -> LossOutput:
    """Binary cross-entropy over held-out positives and sampled negatives.

    Computed as -logsigmoid(pos) - logsigmoid(-neg), summed per user, which
    is finite for any score magnitude a float64 can hold.
    """
    if pos_scores.ndim != 2 or neg_scores.ndim != 2:
        raise DimMismatch(
            f"expected [batch, n] score matrices, got {tuple(pos_scores.shape)} and "
            f"{tuple(neg_scores.shape)}"
        )
    if pos_scores.shape[0] != neg_scores.shape[0]:
        raise DimMismatch(
            f"positive batch {pos_scores.shape[0]} vs negative batch {neg_scores.shape[0]}"
        )
    loss_sum = -(F.logsigmoid(pos_scores).sum() + F.logsigmoid(-neg_scores).sum())
    batch = pos_scores.shape[0]
    return LossOutput(
        objective=loss_sum / batch,
        per_term=float(loss_sum.detach()) / batch,
        n_terms=batch,
    )
