"""Full-catalog ranking evaluation and report arithmetic.

Every score the model can produce competes: the rank of the held-out item
counts strictly higher scores plus tied items at smaller catalog index,
so equal-score candidates resolve deterministically. Context items stay
in the candidate pool unless history masking is switched on explicitly.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import Dataset, HoldoutExample, SplitView
from .encoders import CatalogTensors
from .errors import ConfigInvalid, EmptySplit, MismatchedReports, ZeroBaseline
from .model import TransRecModel
from .objectives import pad_index_sequences


@dataclass(frozen=True)
class RankingResult:
    user_id: str
    target: str
    rank: int


@dataclass(frozen=True)
class MetricsReport:
    run_id: str
    domain: str
    split: str
    k: int
    hr: float
    ndcg: float
    n_users: int
    config_hash: str
    wall_clock_s: float


def target_rank(
    scores: np.ndarray, target_idx: int, candidate_mask: np.ndarray | None = None
) -> int:
    """1-based rank of the target among candidates.

    Ties break by catalog index: a tied item only outranks the target when
    its index is smaller.
    """
    scores = np.asarray(scores)
    if scores.ndim != 1:
        raise ConfigInvalid("scores", f"expected a flat score vector, got shape {scores.shape}")
    if not 0 <= target_idx < scores.shape[0]:
        raise ConfigInvalid("target_idx", f"index {target_idx} outside [0, {scores.shape[0]})")
    if candidate_mask is None:
        candidate_mask = np.ones(scores.shape[0], dtype=bool)
    s_target = scores[target_idx]
    higher = int(np.count_nonzero(candidate_mask & (scores > s_target)))
    tied_before = int(
        np.count_nonzero(
            candidate_mask
            & (scores == s_target)
            & (np.arange(scores.shape[0]) < target_idx)
        )
    )
    return 1 + higher + tied_before


def hit_rate(rank: int, k: int) -> float:
    return 1.0 if rank <= k else 0.0


def ndcg_at_rank(rank: int, k: int) -> float:
    if rank > k:
        return 0.0
    return 1.0 / float(np.log2(rank + 1))


def encode_catalog(
    model: TransRecModel, tensors: CatalogTensors, batch_size: int = 256
) -> torch.Tensor:
    """Embed the whole catalog once, in index order: [n_items, d_model]."""
    was_training = model.training
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, tensors.n_items, batch_size):
            idx = torch.arange(start, min(start + batch_size, tensors.n_items))
            if model.cfg.item_encoder == "id":
                batch = tensors.gather_all_as_ids(idx)
            else:
                batch = tensors.gather(idx)
            chunks.append(model.encode_items(batch))
    if was_training:
        model.train()
    return torch.cat(chunks, dim=0)


def _user_feature_tensors(
    model: TransRecModel, examples: Sequence[HoldoutExample]
) -> dict[str, torch.Tensor] | None:
    specs = model.user_features.specs
    if not specs:
        return None
    out = {}
    for name in specs:
        out[name] = torch.tensor(
            [int((ex.features or {}).get(name, -1)) for ex in examples], dtype=torch.long
        )
    return out


def context_scores(
    model: TransRecModel,
    catalog_vecs: torch.Tensor,
    examples: Sequence[HoldoutExample],
    dataset: Dataset,
    batch_size: int = 256,
) -> np.ndarray:
    """Score every catalog item for each example's context: [n, n_items]."""
    was_training = model.training
    model.eval()
    rows = []
    with torch.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            contexts = [[dataset.item_index[i] for i in ex.context] for ex in chunk]
            padded, mask = pad_index_sequences(contexts)
            seq_vecs = catalog_vecs[padded]
            rep = model.encode_users(
                seq_vecs, mask, causal=False, user_feature_ids=_user_feature_tensors(model, chunk)
            )
            scores = rep.summary @ catalog_vecs.T
            rows.append(scores.to(torch.float64).cpu().numpy())
    if was_training:
        model.train()
    return np.concatenate(rows, axis=0)


def rank_full(
    model: TransRecModel,
    example: HoldoutExample,
    dataset: Dataset,
    tensors: CatalogTensors,
    *,
    mask_history: bool = False,
) -> RankingResult:
    """Rank one held-out item against the entire catalog."""
    catalog_vecs = encode_catalog(model, tensors)
    scores = context_scores(model, catalog_vecs, [example], dataset)[0]
    candidate_mask = None
    if mask_history:
        candidate_mask = np.ones(dataset.n_items, dtype=bool)
        for item_id in example.context:
            candidate_mask[dataset.item_index[item_id]] = False
        candidate_mask[dataset.item_index[example.target]] = True
    rank = target_rank(scores, dataset.item_index[example.target], candidate_mask)
    return RankingResult(user_id=example.user_id, target=example.target, rank=rank)


def _split_examples(split_view: SplitView, split: str) -> tuple[HoldoutExample, ...]:
    if split == "valid":
        return split_view.valid
    if split == "test":
        return split_view.test
    raise ConfigInvalid("split", f"must be 'valid' or 'test', got {split!r}")


def ranks_for_split(
    model: TransRecModel,
    dataset: Dataset,
    split_view: SplitView,
    *,
    split: str = "test",
    mask_history: bool = False,
    tensors: CatalogTensors | None = None,
    catalog_vecs: torch.Tensor | None = None,
    batch_size: int = 256,
) -> np.ndarray:
    examples = _split_examples(split_view, split)
    if not examples:
        raise EmptySplit(split)
    if catalog_vecs is None:
        tensors = tensors if tensors is not None else CatalogTensors(dataset)
        catalog_vecs = encode_catalog(model, tensors)
    scores = context_scores(model, catalog_vecs, examples, dataset, batch_size)
    ranks = np.empty(len(examples), dtype=np.int64)
    for row, ex in enumerate(examples):
        candidate_mask = None
        if mask_history:
            candidate_mask = np.ones(dataset.n_items, dtype=bool)
            for item_id in ex.context:
                candidate_mask[dataset.item_index[item_id]] = False
            candidate_mask[dataset.item_index[ex.target]] = True
        ranks[row] = target_rank(scores[row], dataset.item_index[ex.target], candidate_mask)
    return ranks


def summarize_ranks(ranks: np.ndarray, k: int) -> tuple[float, float]:
    """Mean hit rate and mean NDCG at cutoff k over per-user ranks."""
    if k < 1:
        raise ConfigInvalid("k", f"must be >= 1, got {k}")
    ranks = np.asarray(ranks)
    hits = ranks <= k
    hr = float(np.mean(hits.astype(np.float64)))
    gains = np.where(hits, 1.0 / np.log2(ranks + 1.0), 0.0)
    return hr, float(np.mean(gains))


def evaluate(
    model: TransRecModel,
    dataset: Dataset,
    split_view: SplitView,
    *,
    split: str = "test",
    k: int = 10,
    mask_history: bool = False,
    run_id: str = "run",
    config_hash: str = "",
    tensors: CatalogTensors | None = None,
    catalog_vecs: torch.Tensor | None = None,
    batch_size: int = 256,
) -> MetricsReport:
    started = time.perf_counter()
    ranks = ranks_for_split(
        model,
        dataset,
        split_view,
        split=split,
        mask_history=mask_history,
        tensors=tensors,
        catalog_vecs=catalog_vecs,
        batch_size=batch_size,
    )
    hr, ndcg = summarize_ranks(ranks, k)
    return MetricsReport(
        run_id=run_id,
        domain=dataset.domain,
        split=split,
        k=k,
        hr=hr,
        ndcg=ndcg,
        n_users=int(ranks.shape[0]),
        config_hash=config_hash,
        wall_clock_s=time.perf_counter() - started,
    )


def evaluate_sampled(
    model: TransRecModel,
    dataset: Dataset,
    split_view: SplitView,
    *,
    split: str = "test",
    k: int = 10,
    n_sampled: int = 99,
    seed: int = 0,
    run_id: str = "run",
    config_hash: str = "",
    tensors: CatalogTensors | None = None,
    catalog_vecs: torch.Tensor | None = None,
) -> MetricsReport:
    """Rank the target against a per-user random candidate sample instead
    of the full catalog. Kept only to demonstrate how sampled candidates
    inflate metrics; full ranking is the reporting default."""
    started = time.perf_counter()
    examples = _split_examples(split_view, split)
    if not examples:
        raise EmptySplit(split)
    if catalog_vecs is None:
        tensors = tensors if tensors is not None else CatalogTensors(dataset)
        catalog_vecs = encode_catalog(model, tensors)
    scores = context_scores(model, catalog_vecs, examples, dataset)
    rng = np.random.default_rng(seed)
    ranks = np.empty(len(examples), dtype=np.int64)
    for row, ex in enumerate(examples):
        target_idx = dataset.item_index[ex.target]
        banned = {dataset.item_index[i] for i in ex.context} | {target_idx}
        eligible = np.array([i for i in range(dataset.n_items) if i not in banned], dtype=np.int64)
        take = min(n_sampled, eligible.size)
        sampled = rng.choice(eligible, size=take, replace=False) if take else np.array([], dtype=np.int64)
        candidate_mask = np.zeros(dataset.n_items, dtype=bool)
        candidate_mask[sampled] = True
        candidate_mask[target_idx] = True
        ranks[row] = target_rank(scores[row], target_idx, candidate_mask)
    hr, ndcg = summarize_ranks(ranks, k)
    return MetricsReport(
        run_id=run_id,
        domain=dataset.domain,
        split=f"{split}~sampled{n_sampled}",
        k=k,
        hr=hr,
        ndcg=ndcg,
        n_users=int(ranks.shape[0]),
        config_hash=config_hash,
        wall_clock_s=time.perf_counter() - started,
    )


# ---------------------------------------------------------------------------
# report files and comparison

CSV_COLUMNS = ["run_id", "domain", "split", "k", "hr", "ndcg", "n_users", "config_hash"]


def write_reports(reports: Sequence[MetricsReport], path: str | Path, *, append: bool = False) -> None:
    path = Path(path)
    exists = path.exists() and append
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        if not exists:
            writer.writerow(CSV_COLUMNS)
        for report in reports:
            writer.writerow(
                [
                    report.run_id,
                    report.domain,
                    report.split,
                    report.k,
                    f"{report.hr:.6f}",
                    f"{report.ndcg:.6f}",
                    report.n_users,
                    report.config_hash,
                ]
            )


def read_reports(path: str | Path) -> list[MetricsReport]:
    """Rows back as reports; timing is a run-time observation, not persisted."""
    reports = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            reports.append(
                MetricsReport(
                    run_id=row["run_id"],
                    domain=row["domain"],
                    split=row["split"],
                    k=int(row["k"]),
                    hr=float(row["hr"]),
                    ndcg=float(row["ndcg"]),
                    n_users=int(row["n_users"]),
                    config_hash=row["config_hash"],
                    wall_clock_s=0.0,
                )
            )
    return reports


@dataclass(frozen=True)
class Comparison:
    baseline: MetricsReport
    challenger: MetricsReport
    hr_gain_pct: float
    ndcg_gain_pct: float

    def to_markdown(self) -> str:
        b, c = self.baseline, self.challenger
        lines = [
            f"| metric | {b.run_id} | {c.run_id} | gain |",
            "| --- | --- | --- | --- |",
            f"| HR@{b.k} | {b.hr:.4f} | {c.hr:.4f} | {self.hr_gain_pct:+.2f}% |",
            f"| NDCG@{b.k} | {b.ndcg:.4f} | {c.ndcg:.4f} | {self.ndcg_gain_pct:+.2f}% |",
        ]
        return "\n".join(lines) + "\n"


def compare(baseline: MetricsReport, challenger: MetricsReport) -> Comparison:
    """Relative improvement of ``challenger`` over ``baseline``, in percent."""
    for field_name in ("domain", "split", "k"):
        a, b = getattr(baseline, field_name), getattr(challenger, field_name)
        if a != b:
            raise MismatchedReports(field_name, a, b)
    if baseline.hr == 0.0:
        raise ZeroBaseline("hr")
    if baseline.ndcg == 0.0:
        raise ZeroBaseline("ndcg")
    return Comparison(
        baseline=baseline,
        challenger=challenger,
        hr_gain_pct=100.0 * (challenger.hr - baseline.hr) / baseline.hr,
        ndcg_gain_pct=100.0 * (challenger.ndcg - baseline.ndcg) / baseline.ndcg,
    )
