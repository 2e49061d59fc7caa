"""Closed-form oracles for both training objectives.

The two anchor values are worked out by hand, not by running the code:

* next-item CE with uniform logits: every one of the |V| classes gets
  probability 1/|V|, so the loss at each labeled position is ln|V|.
  A zero-initialized head produces all-zero logits (ReLU keeps them zero),
  which is the uniform case.
* contrastive loss at zero scores: sigmoid(0) = 1/2, so each positive and
  each negative contributes -ln(1/2) = ln 2. With l positives and j
  negatives per user the per-user value is (l + j) ln 2.
"""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from transrec.errors import (
    CatalogExhausted,
    ConfigInvalid,
    DimMismatch,
    LabelOutOfRange,
    SequenceTooShort,
)
from transrec.objectives import (
    contrastive_loss,
    next_item_loss,
    pad_index_sequences,
    sample_negatives,
    split_context_target,
)

V = 37  # catalog size for the head tests; arbitrary, prime to avoid luck


def zero_head(d=8, n_classes=V, dtype=torch.float64):
    head = torch.nn.Linear(d, n_classes, dtype=dtype)
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
    return head


# ---------------------------------------------------------------------------
# anchor values


def test_uniform_logits_give_log_catalog_size():
    head = zero_head()
    torch.manual_seed(0)
    hidden = torch.randn(3, 5, 8, dtype=torch.float64)
    labels = torch.randint(0, V, (3, 5))
    mask = torch.ones(3, 5, dtype=torch.bool)
    out = next_item_loss(hidden, labels, mask, head)
    assert out.per_term == pytest.approx(math.log(V), abs=1e-6)
    assert out.n_terms == 15
    # objective is the batch-sum over users: 5 positions each
    assert float(out.objective.detach()) == pytest.approx(5 * math.log(V), abs=1e-6)


def test_uniform_logits_anchor_holds_without_relu():
    out = next_item_loss(
        torch.zeros(2, 3, 8, dtype=torch.float64),
        torch.zeros(2, 3, dtype=torch.long),
        torch.ones(2, 3, dtype=torch.bool),
        zero_head(),
        apply_relu=False,
    )
    assert out.per_term == pytest.approx(math.log(V), abs=1e-6)


def test_zero_scores_give_log2_per_comparison():
    l, j = 2, 4
    out = contrastive_loss(
        torch.zeros(5, l, dtype=torch.float64), torch.zeros(5, j, dtype=torch.float64)
    )
    assert out.per_term == pytest.approx((l + j) * math.log(2), abs=1e-12)
    assert float(out.objective.detach()) == pytest.approx((l + j) * math.log(2), abs=1e-12)
    assert out.n_terms == 5


# ---------------------------------------------------------------------------
# hand-computed small cases


def test_next_item_loss_matches_hand_softmax():
    """One position, three classes, logits picked so the math is short."""
    head = torch.nn.Linear(2, 3, dtype=torch.float64)
    with torch.no_grad():
        head.weight.copy_(torch.tensor([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]))
        head.bias.zero_()
    hidden = torch.tensor([[[2.0, 1.0]]], dtype=torch.float64)  # logits (2, 1, 0)
    labels = torch.tensor([[0]])
    mask = torch.ones(1, 1, dtype=torch.bool)
    out = next_item_loss(hidden, labels, mask, head, apply_relu=False)
    z = math.exp(2.0) + math.exp(1.0) + 1.0
    assert float(out.objective.detach()) == pytest.approx(-math.log(math.exp(2.0) / z), abs=1e-12)


def test_relu_switch_changes_negative_logits_only():
    head = torch.nn.Linear(2, 3, dtype=torch.float64)
    with torch.no_grad():
        head.weight.copy_(torch.tensor([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]))
        head.bias.zero_()
    labels = torch.tensor([[0]])
    mask = torch.ones(1, 1, dtype=torch.bool)

    neg = torch.tensor([[[-3.0, -1.0]]], dtype=torch.float64)
    with_relu = next_item_loss(neg, labels, mask, head, apply_relu=True)
    without = next_item_loss(neg, labels, mask, head, apply_relu=False)
    # relu clamps (-3, -1, 0) to (0, 0, 0): uniform over three classes
    assert with_relu.per_term == pytest.approx(math.log(3), abs=1e-12)
    assert without.per_term != pytest.approx(math.log(3), abs=1e-6)

    pos = torch.tensor([[[3.0, 1.0]]], dtype=torch.float64)
    same_a = next_item_loss(pos, labels, mask, head, apply_relu=True)
    same_b = next_item_loss(pos, labels, mask, head, apply_relu=False)
    assert same_a.per_term == pytest.approx(same_b.per_term, abs=1e-12)


def test_contrastive_loss_matches_hand_formula():
    pos = torch.tensor([[1.5, -0.5]], dtype=torch.float64)
    neg = torch.tensor([[0.25, 2.0, -1.0]], dtype=torch.float64)
    out = contrastive_loss(pos, neg)
    expected = -(
        sum(math.log(1 / (1 + math.exp(-x))) for x in (1.5, -0.5))
        + sum(math.log(1 / (1 + math.exp(x))) for x in (0.25, 2.0, -1.0))
    )
    assert float(out.objective.detach()) == pytest.approx(expected, abs=1e-12)


def test_contrastive_loss_stable_at_extreme_scores():
    out = contrastive_loss(
        torch.tensor([[-1000.0]], dtype=torch.float64),
        torch.tensor([[1000.0]], dtype=torch.float64),
    )
    assert math.isfinite(float(out.objective.detach()))
    assert float(out.objective.detach()) == pytest.approx(2000.0, rel=1e-9)


# ---------------------------------------------------------------------------
# gradient directions


def test_contrastive_gradient_signs():
    pos = torch.randn(3, 2, dtype=torch.float64, requires_grad=True)
    neg = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    contrastive_loss(pos, neg).objective.backward()
    assert (pos.grad < 0).all()  # raising a positive score always helps
    assert (neg.grad > 0).all()  # raising a negative score always hurts


def test_next_item_gradient_raises_target_logit():
    head = zero_head(d=4, n_classes=5)
    hidden = torch.randn(1, 1, 4, dtype=torch.float64)
    labels = torch.tensor([[2]])
    mask = torch.ones(1, 1, dtype=torch.bool)
    next_item_loss(hidden, labels, mask, head, apply_relu=False).objective.backward()
    g = head.bias.grad
    assert g[2] < 0
    assert (g[[0, 1, 3, 4]] > 0).all()
    assert float(g.sum()) == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------------------
# masking and permutation invariance


def test_masked_labels_do_not_contribute():
    head = zero_head()
    torch.manual_seed(1)
    hidden = torch.randn(2, 4, 8, dtype=torch.float64)
    labels = torch.randint(0, V, (2, 4))
    mask = torch.tensor([[True, True, False, False], [True, False, False, False]])

    out = next_item_loss(hidden, labels, mask, head)
    hostile = labels.clone()
    hostile[~mask] = V - 1  # junk in masked slots must be invisible
    out2 = next_item_loss(hidden, hostile, mask, head)
    assert float(out.objective.detach()) == pytest.approx(float(out2.objective.detach()), abs=0)
    assert out.n_terms == 3


def test_batch_permutation_invariance():
    torch.manual_seed(2)
    head = torch.nn.Linear(8, V, dtype=torch.float64)
    hidden = torch.randn(6, 5, 8, dtype=torch.float64)
    labels = torch.randint(0, V, (6, 5))
    mask = torch.rand(6, 5) < 0.8
    mask[:, 0] = True
    perm = torch.randperm(6)

    a = next_item_loss(hidden, labels, mask, head)
    b = next_item_loss(hidden[perm], labels[perm], mask[perm], head)
    assert float(a.objective.detach()) == pytest.approx(float(b.objective.detach()), abs=1e-12)

    pos = torch.randn(6, 2, dtype=torch.float64)
    neg = torch.randn(6, 4, dtype=torch.float64)
    ca = contrastive_loss(pos, neg)
    cb = contrastive_loss(pos[perm], neg[perm])
    assert float(ca.objective.detach()) == pytest.approx(float(cb.objective.detach()), abs=1e-12)


# ---------------------------------------------------------------------------
# error taxonomy


def test_next_item_loss_errors():
    head = zero_head()
    good_hidden = torch.zeros(1, 2, 8, dtype=torch.float64)
    good_labels = torch.zeros(1, 2, dtype=torch.long)
    good_mask = torch.ones(1, 2, dtype=torch.bool)
    with pytest.raises(DimMismatch):
        next_item_loss(torch.zeros(2, 8), good_labels, good_mask, head)
    with pytest.raises(DimMismatch):
        next_item_loss(good_hidden, torch.zeros(1, 3, dtype=torch.long), good_mask, head)
    with pytest.raises(SequenceTooShort):
        next_item_loss(good_hidden, good_labels, torch.zeros(1, 2, dtype=torch.bool), head)
    with pytest.raises(LabelOutOfRange):
        next_item_loss(good_hidden, torch.full((1, 2), V, dtype=torch.long), good_mask, head)
    with pytest.raises(LabelOutOfRange):
        next_item_loss(good_hidden, torch.full((1, 2), -1, dtype=torch.long), good_mask, head)


def test_contrastive_loss_errors():
    with pytest.raises(DimMismatch):
        contrastive_loss(torch.zeros(3), torch.zeros(3, 4))
    with pytest.raises(DimMismatch):
        contrastive_loss(torch.zeros(2, 2), torch.zeros(3, 4))


# ---------------------------------------------------------------------------
# context/target split


def test_split_context_target_takes_the_tail():
    ctx, tgt = split_context_target(["a", "b", "c", "d", "e"], 2)
    assert ctx == ["a", "b", "c"]
    assert tgt == ["d", "e"]


def test_split_context_target_errors():
    with pytest.raises(SequenceTooShort):
        split_context_target([1, 2], 2)
    with pytest.raises(ConfigInvalid):
        split_context_target([1, 2, 3], 0)


@given(st.lists(st.integers(), min_size=3, max_size=30), st.integers(1, 5))
def test_split_reassembles(items, n_future):
    if len(items) < n_future + 1:
        return
    ctx, tgt = split_context_target(items, n_future)
    assert ctx + tgt == items
    assert len(tgt) == n_future


# ---------------------------------------------------------------------------
# negative sampling


def test_negatives_exclude_full_history():
    rng = np.random.default_rng(0)
    history = [0, 3, 7]
    for _ in range(200):
        negs = sample_negatives(history, catalog_size=10, n_negatives=4, rng=rng)
        assert not set(negs.tolist()) & set(history)
        assert len(set(negs.tolist())) == 4
        assert all(0 <= n < 10 for n in negs.tolist())


def test_negatives_cover_all_eligible_items():
    rng = np.random.default_rng(1)
    seen = set()
    for _ in range(300):
        seen.update(sample_negatives([2], catalog_size=6, n_negatives=2, rng=rng).tolist())
    assert seen == {0, 1, 3, 4, 5}


def test_negatives_exhaustion_and_validation():
    rng = np.random.default_rng(2)
    with pytest.raises(CatalogExhausted):
        sample_negatives([0, 1, 2], catalog_size=5, n_negatives=3, rng=rng)
    with pytest.raises(ConfigInvalid):
        sample_negatives([0], catalog_size=5, n_negatives=0, rng=rng)
    with pytest.raises(ConfigInvalid):
        sample_negatives([5], catalog_size=5, n_negatives=1, rng=rng)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_negatives_uniform_without_replacement(seed):
    rng = np.random.default_rng(seed)
    negs = sample_negatives([1, 4], catalog_size=9, n_negatives=5, rng=rng)
    assert len(set(negs.tolist())) == 5
    assert not {1, 4} & set(negs.tolist())


# ---------------------------------------------------------------------------
# padding


def test_pad_index_sequences_layout():
    padded, mask = pad_index_sequences([[5, 6, 7], [8]], pad_value=0)
    assert padded.tolist() == [[5, 6, 7], [8, 0, 0]]
    assert mask.tolist() == [[True, True, True], [True, False, False]]


def test_pad_index_sequences_errors():
    with pytest.raises(SequenceTooShort):
        pad_index_sequences([])
    with pytest.raises(SequenceTooShort):
        pad_index_sequences([[], []])
