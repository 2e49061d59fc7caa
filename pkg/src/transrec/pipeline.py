"""Training loops, transfer modes, and the gradient checker.

Stage one pretrains on the source domain with causal next-item prediction;
stage two trains end to end with the contrastive objective. Adapting to a
target domain either starts fresh, finetunes everything from a source
checkpoint, or loads the checkpoint with the item encoders frozen. Runs
are deterministic: one seed fixes initialization, batch order, and
negative sampling, and training aborts loudly if the loss or any
parameter stops being finite.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Iterable

import numpy as np
import torch

from .checkpoint import ApplyReport, Checkpoint, apply_checkpoint, snapshot_model
from .corpus import Dataset, Modality, leave_one_out_split
from .encoders import CatalogTensors
from .errors import (
    ConfigInvalid,
    DataTooSmall,
    DivergedLoss,
    MissingCheckpoint,
    ToleranceExceeded,
)
from .evaluation import evaluate
from .model import ModelConfig, TransRecModel, infer_feature_specs
from .objectives import (
    contrastive_loss,
    next_item_loss,
    pad_index_sequences,
    sample_negatives,
    split_context_target,
)

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TransferMode(str, Enum):
    SCRATCH = "scratch"
    FINETUNE = "finetune"
    FROZEN = "frozen"


# namespaces whose weights carry across catalogs: the content encoders and the
# sequence model. ID embeddings, the softmax head, and feature fusions are
# bound to one catalog's ids/cardinalities and always start fresh on a target.
TRANSFER_PREFIXES = ("item_tower.encoders.", "user_encoder.")
NON_TRANSFER_PREFIXES = ("item_tower.encoders.id.",)


def transfer_model_config(source_cfg: ModelConfig, target: Dataset) -> ModelConfig:
    """The source architecture rebound to a target dataset.

    Encoder widths and depths carry over verbatim so the arch hash (and
    therefore the checkpoint) stays valid; only dataset-bound pieces
    change: the image size the conv stack is validated against, the
    position budget, and the feature vocabularies. An encoder stays
    configured even when the target catalog never routes items to it.
    """
    vision = source_cfg.vision
    if vision is not None:
        shape = None
        for item in target.catalog.values():
            if item.modality is Modality.VISION and item.image is not None:
                shape = tuple(int(d) for d in item.image.shape)
                break
        if shape is not None:
            if shape[0] != vision.in_channels:
                raise ConfigInvalid(
                    "vision.image_shape",
                    f"target images have {shape[0]} channels but the source model "
                    f"was built for {vision.in_channels}",
                )
            if (vision.image_h, vision.image_w) != (shape[1], shape[2]):
                vision = replace(vision, image_h=shape[1], image_w=shape[2])
    user = source_cfg.user
    if target.max_seq_len > user.max_positions:
        user = replace(user, max_positions=target.max_seq_len)
    cfg = ModelConfig(
        d_model=source_cfg.d_model,
        user=user,
        item_encoder=source_cfg.item_encoder,
        text=source_cfg.text,
        vision=vision,
        item_features=infer_feature_specs(
            (item.features for item in target.catalog.values()), source_cfg.d_model
        ),
        user_features=infer_feature_specs(
            (u.features for u in target.users), source_cfg.d_model
        ),
    )
    cfg.validate()
    return cfg


def transferable_view(ckpt: Checkpoint) -> Checkpoint:
    """The subset of a checkpoint that is meaningful on a disjoint catalog."""
    kept = {
        name: arr
        for name, arr in ckpt.tensors.items()
        if name.startswith(TRANSFER_PREFIXES) and not name.startswith(NON_TRANSFER_PREFIXES)
    }
    return Checkpoint(
        config_hash=ckpt.config_hash,
        stage=ckpt.stage,
        domain=ckpt.domain,
        step=ckpt.step,
        tensors=kept,
        metrics=dict(ckpt.metrics),
        format_version=ckpt.format_version,
    )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 30
    patience: int = 5
    grad_clip: float = 5.0
    n_future: int = 2
    n_negatives: int = 4
    head_relu: bool = True
    stage1_train_items: bool = True
    valid_k: int = 10

    def validate(self) -> None:
        if not self.learning_rate >= 0.0:
            raise ConfigInvalid("learning_rate", f"must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigInvalid("batch_size", f"must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ConfigInvalid("max_epochs", f"must be >= 0, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigInvalid("patience", f"must be >= 1, got {self.patience}")
        if not self.grad_clip > 0.0:
            raise ConfigInvalid("grad_clip", f"must be > 0, got {self.grad_clip}")
        if self.n_future < 1:
            raise ConfigInvalid("n_future", f"must be >= 1, got {self.n_future}")
        if self.n_negatives < 1:
            raise ConfigInvalid("n_negatives", f"must be >= 1, got {self.n_negatives}")
        if self.valid_k < 1:
            raise ConfigInvalid("valid_k", f"must be >= 1, got {self.valid_k}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    split: str
    loss: float | None
    hr: float | None
    ndcg: float | None


@dataclass
class TrainResult:
    model: TransRecModel
    checkpoint: Checkpoint
    history: list[EpochRecord]
    best_epoch: int
    best_valid_hr: float
    apply_report: ApplyReport | None = None


EpochCallback = Callable[[EpochRecord], None]

STAGE_USER_PRETRAIN = "user_pretrain"
STAGE_END_TO_END = "end_to_end"
STAGE_ADAPT = "adapt"


def _user_feature_ids(model: TransRecModel, seqs) -> dict[str, torch.Tensor] | None:
    specs = model.user_features.specs
    if not specs:
        return None
    out = {}
    for name in specs:
        out[name] = torch.tensor(
            [int((s.features or {}).get(name, -1)) for s in seqs], dtype=torch.long
        )
    return out


def _encode_sequences(
    model: TransRecModel,
    tensors: CatalogTensors,
    index_lists: list[list[int]],
    *,
    extra_indices: list[np.ndarray] | None = None,
    frozen_items: bool = False,
) -> tuple[torch.Tensor, torch.Tensor, list[torch.Tensor]]:
    """Encode every unique item once, then assemble padded sequence tensors.

    Returns (seq_vecs [B, L, D], mask [B, L], extras) where each entry of
    ``extras`` is the [B, n_i, D] embedding block for one extra index
    array (targets, negatives).
    """
    padded, mask = pad_index_sequences(index_lists)
    pieces = [padded.flatten()]
    extra_indices = extra_indices or []
    extra_tensors = [torch.from_numpy(np.ascontiguousarray(arr)).long() for arr in extra_indices]
    pieces.extend(t.flatten() for t in extra_tensors)
    flat = torch.cat(pieces)
    unique, inverse = torch.unique(flat, return_inverse=True)
    if model.cfg.item_encoder == "id":
        batch = tensors.gather_all_as_ids(unique)
    else:
        batch = tensors.gather(unique)
    unique_vecs = model.encode_items(batch, frozen=frozen_items)
    offset = padded.numel()
    seq_vecs = unique_vecs[inverse[:offset]].view(*padded.shape, -1)
    extras = []
    for t in extra_tensors:
        n = t.numel()
        extras.append(unique_vecs[inverse[offset : offset + n]].view(*t.shape, -1))
        offset += n
    return seq_vecs, mask, extras


def _check_finite(loss_value: float, model: TransRecModel, epoch: int, step: int) -> None:
    if not math.isfinite(loss_value):
        raise DivergedLoss(epoch, step, f"loss became {loss_value}")
    for name, param in model.named_parameters():
        if not bool(torch.isfinite(param).all()):
            raise DivergedLoss(epoch, step, f"parameter {name!r} contains non-finite values")


@dataclass
class _FitState:
    best_epoch: int = 0
    best_hr: float = -1.0
    best_ndcg: float = 0.0
    best_snapshot: dict | None = None
    stale: int = 0


def _fit(
    model: TransRecModel,
    dataset: Dataset,
    cfg: TrainConfig,
    seed: int,
    stage: str,
    step_fn,
    usable,
    *,
    on_epoch: EpochCallback | None = None,
) -> tuple[list[EpochRecord], _FitState, int]:
    """Shared epoch loop: shuffle, step, validate, snapshot the best."""
    if not usable:
        raise DataTooSmall(
            f"domain {dataset.domain!r} has no user sequence long enough for stage {stage!r}"
        )
    tensors = CatalogTensors(dataset)
    split_view = leave_one_out_split(dataset)
    rng = np.random.default_rng(seed)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(
        trainable, lr=cfg.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS
    )

    history: list[EpochRecord] = []
    state = _FitState()

    def validate(epoch: int) -> None:
        report = evaluate(
            model,
            dataset,
            split_view,
            split="valid",
            k=cfg.valid_k,
            tensors=tensors,
        )
        record = EpochRecord(epoch=epoch, split="valid", loss=None, hr=report.hr, ndcg=report.ndcg)
        history.append(record)
        if on_epoch:
            on_epoch(record)
        if report.hr > state.best_hr:
            state.best_hr = report.hr
            state.best_ndcg = report.ndcg
            state.best_epoch = epoch
            state.best_snapshot = {
                k: v.detach().clone() for k, v in model.state_dict().items()
            }
            state.stale = 0
        else:
            state.stale += 1

    validate(0)
    global_step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = rng.permutation(len(usable))
        epoch_loss = 0.0
        epoch_terms = 0
        for start in range(0, len(order), cfg.batch_size):
            chosen = [usable[i] for i in order[start : start + cfg.batch_size]]
            loss_out = step_fn(chosen, tensors, rng)
            optimizer.zero_grad(set_to_none=True)
            loss_out.objective.backward()
            torch.nn.utils.clip_grad_norm_(trainable, cfg.grad_clip)
            optimizer.step()
            global_step += 1
            _check_finite(float(loss_out.objective.detach()), model, epoch, global_step)
            epoch_loss += loss_out.per_term * loss_out.n_terms
            epoch_terms += loss_out.n_terms
        record = EpochRecord(
            epoch=epoch,
            split="train",
            loss=epoch_loss / max(epoch_terms, 1),
            hr=None,
            ndcg=None,
        )
        history.append(record)
        if on_epoch:
            on_epoch(record)
        validate(epoch)
        if state.stale > cfg.patience:
            logger.info(
                "stopping after epoch %d: no validation improvement in %d epochs",
                epoch,
                state.stale,
            )
            break

    if state.best_snapshot is not None:
        model.load_state_dict(state.best_snapshot)
    return history, state, global_step


def _finish(
    model: TransRecModel,
    dataset: Dataset,
    stage: str,
    history: list[EpochRecord],
    state: _FitState,
    global_step: int,
    apply_report: ApplyReport | None = None,
) -> TrainResult:
    metrics = {
        "valid_hr": max(state.best_hr, 0.0),
        "valid_ndcg": state.best_ndcg,
        "best_epoch": float(state.best_epoch),
    }
    ckpt = snapshot_model(
        model,
        stage=stage,
        domain=dataset.domain,
        step=global_step,
        config_hash=model.arch_hash,
        metrics=metrics,
    )
    return TrainResult(
        model=model,
        checkpoint=ckpt,
        history=history,
        best_epoch=state.best_epoch,
        best_valid_hr=max(state.best_hr, 0.0),
        apply_report=apply_report,
    )


def pretrain_user_encoder(
    source: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    *,
    dtype: torch.dtype,
    seed: int,
    on_epoch: EpochCallback | None = None,
) -> TrainResult:
    """Stage one: causal next-item prediction over the full source catalog."""
    train_cfg.validate()
    torch.manual_seed(seed)
    model = TransRecModel(model_cfg, source.n_items, dtype, seed)
    split_view = leave_one_out_split(source)
    usable = []
    for user in split_view.train:
        idx = [source.item_index[i] for i in user.items]
        if len(idx) >= 2:
            usable.append(idx)
    if train_cfg.stage1_train_items is False:
        for name, param in model.named_parameters():
            if name.startswith("item_tower.encoders."):
                param.requires_grad_(False)

    def step(chosen: list[list[int]], tensors: CatalogTensors, rng) -> object:
        inputs = [seq[:-1] for seq in chosen]
        labels = [seq[1:] for seq in chosen]
        seq_vecs, mask, _ = _encode_sequences(
            model, tensors, inputs, frozen_items=not train_cfg.stage1_train_items
        )
        rep = model.encode_users(seq_vecs, mask, causal=True)
        padded_labels, label_mask = pad_index_sequences(labels)
        return next_item_loss(
            rep.hidden,
            padded_labels,
            label_mask,
            model.softmax_head,
            apply_relu=train_cfg.head_relu,
        )

    history, state, steps = _fit(
        model, source, train_cfg, seed, STAGE_USER_PRETRAIN, step, usable, on_epoch=on_epoch
    )
    return _finish(model, source, STAGE_USER_PRETRAIN, history, state, steps)


def _contrastive_step_fn(model: TransRecModel, dataset: Dataset, cfg: TrainConfig, frozen_items: bool):
    n_items = dataset.n_items

    def step(chosen, tensors: CatalogTensors, rng):
        contexts = []
        targets = []
        negatives = []
        for user, train_items in chosen:
            ctx, tail = split_context_target(train_items, cfg.n_future)
            contexts.append(ctx)
            targets.append(np.asarray(tail, dtype=np.int64))
            full_history = [dataset.item_index[i] for i in user.items]
            negatives.append(
                sample_negatives(full_history, n_items, cfg.n_negatives, rng)
            )
        seq_vecs, mask, extras = _encode_sequences(
            model,
            tensors,
            contexts,
            extra_indices=[np.stack(targets), np.stack(negatives)],
            frozen_items=frozen_items,
        )
        target_vecs, negative_vecs = extras
        rep = model.encode_users(
            seq_vecs,
            mask,
            causal=False,
            user_feature_ids=_user_feature_ids(model, [u for u, _ in chosen]),
        )
        pos = (target_vecs @ rep.summary[:, :, None]).squeeze(-1)
        neg = (negative_vecs @ rep.summary[:, :, None]).squeeze(-1)
        return contrastive_loss(pos, neg)

    return step


def _contrastive_usable(dataset: Dataset, n_future: int):
    split_view = leave_one_out_split(dataset)
    usable = []
    skipped = 0
    for user in split_view.train:
        idx = [dataset.item_index[i] for i in user.items]
        if len(idx) >= n_future + 1:
            usable.append((user, idx))
        else:
            skipped += 1
    if skipped:
        logger.warning(
            "skipping %d user(s) whose training split is shorter than %d items",
            skipped,
            n_future + 1,
        )
    return usable


def train_end_to_end(
    source: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    *,
    dtype: torch.dtype,
    seed: int,
    init: Checkpoint | None = None,
    force_compat: bool = False,
    on_epoch: EpochCallback | None = None,
) -> TrainResult:
    """Stage two on the source domain: contrastive loss over held-out tail
    items and sampled negatives, optionally starting from a stage-one
    checkpoint."""
    train_cfg.validate()
    torch.manual_seed(seed)
    model = TransRecModel(model_cfg, source.n_items, dtype, seed)
    apply_report = None
    if init is not None:
        apply_report = apply_checkpoint(
            model, init, expected_hash=model.arch_hash, force_compat=force_compat
        )
    usable = _contrastive_usable(source, train_cfg.n_future)
    step = _contrastive_step_fn(model, source, train_cfg, frozen_items=False)
    history, state, steps = _fit(
        model, source, train_cfg, seed, STAGE_END_TO_END, step, usable, on_epoch=on_epoch
    )
    return _finish(model, source, STAGE_END_TO_END, history, state, steps, apply_report=apply_report)


def adapt_to_target(
    target: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    *,
    mode: TransferMode,
    dtype: torch.dtype,
    seed: int,
    pretrained: Checkpoint | None = None,
    force_compat: bool = False,
    on_epoch: EpochCallback | None = None,
) -> TrainResult:
    """Stage three: train on a target domain under one of three regimes.

    scratch ignores any checkpoint (with a warning if one was passed),
    finetune loads shared tensors and trains everything, frozen loads and
    then blocks gradients into the item encoders. Target-specific tensors
    missing from the checkpoint stay fresh and are reported by name.
    """
    train_cfg.validate()
    mode = TransferMode(mode)
    torch.manual_seed(seed)
    model = TransRecModel(model_cfg, target.n_items, dtype, seed)
    apply_report = None
    if mode is TransferMode.SCRATCH:
        if pretrained is not None:
            logger.warning("scratch mode ignores the provided checkpoint")
    else:
        if pretrained is None:
            raise MissingCheckpoint(
                f"transfer mode {mode.value!r} needs a source checkpoint (--from-checkpoint)"
            )
        apply_report = apply_checkpoint(
            model,
            transferable_view(pretrained),
            expected_hash=model.arch_hash,
            force_compat=force_compat,
        )
    frozen_items = mode is TransferMode.FROZEN
    if frozen_items:
        frozen_names = []
        for name, param in model.named_parameters():
            if name.startswith("item_tower.encoders."):
                param.requires_grad_(False)
                frozen_names.append(name)
        logger.info("frozen item-encoder tensors: %s", ", ".join(frozen_names))
    usable = _contrastive_usable(target, train_cfg.n_future)
    step = _contrastive_step_fn(model, target, train_cfg, frozen_items=frozen_items)
    history, state, steps = _fit(
        model, target, train_cfg, seed, STAGE_ADAPT, step, usable, on_epoch=on_epoch
    )
    return _finish(model, target, STAGE_ADAPT, history, state, steps, apply_report=apply_report)


# ---------------------------------------------------------------------------
# gradient verification

MAX_CHECKED_PARAMS = 2048
FD_EPSILON = 1e-5
FD_TOLERANCE = 1e-4
# relative error floors at this scale so finite-difference round-off on
# near-zero gradients cannot dominate the ratio
FD_DENOM_FLOOR = 1e-4


@dataclass(frozen=True)
class GradCheckEntry:
    name: str
    max_rel_err: float
    at_index: int
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    max_rel_err: float
    worst: str
    n_params: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def to_text(self) -> str:
        lines = [
            f"checked {self.n_params} parameters, tolerance {self.tolerance:.1e}",
        ]
        for entry in self.entries:
            lines.append(
                f"  {entry.name}: max rel err {entry.max_rel_err:.3e} at flat index "
                f"{entry.at_index} (analytic {entry.analytic:+.6e}, numeric {entry.numeric:+.6e})"
            )
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict}: worst {self.worst} at {self.max_rel_err:.3e}")
        return "\n".join(lines) + "\n"


def grad_check(
    named_params: Iterable[tuple[str, torch.Tensor]],
    loss_fn: Callable[[], torch.Tensor],
    *,
    eps: float = FD_EPSILON,
    tolerance: float = FD_TOLERANCE,
    raise_on_fail: bool = True,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``loss_fn`` must be a deterministic closure over the given parameters.
    All parameters must be float64 and their total size at most 2048
    entries, keeping the check exact and fast.
    """
    params = list(named_params)
    if not params:
        raise ConfigInvalid("named_params", "nothing to check")
    total = sum(p.numel() for _, p in params)
    if total > MAX_CHECKED_PARAMS:
        raise ConfigInvalid(
            "named_params",
            f"{total} parameters exceed the {MAX_CHECKED_PARAMS}-entry budget for exact checking",
        )
    for name, p in params:
        if p.dtype != torch.float64:
            raise ConfigInvalid(
                "precision",
                f"gradient checking requires float64 parameters; {name!r} is {p.dtype} "
                f"(set TRANSREC_PRECISION=f64)",
            )

    for _, p in params:
        p.grad = None
    loss = loss_fn()
    if loss.requires_grad:
        loss.backward()
    analytic = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in params
    }

    entries = []
    worst_name = params[0][0]
    worst_err = 0.0
    with torch.no_grad():
        for name, p in params:
            flat = p.view(-1)
            grad_flat = analytic[name].view(-1)
            local_worst = 0.0
            local_idx = 0
            local_pair = (0.0, 0.0)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = float(loss_fn())
                flat[i] = orig - eps
                f_minus = float(loss_fn())
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = float(grad_flat[i])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), FD_DENOM_FLOOR)
                if rel > local_worst:
                    local_worst = rel
                    local_idx = i
                    local_pair = (a, numeric)
            entries.append(
                GradCheckEntry(
                    name=name,
                    max_rel_err=local_worst,
                    at_index=local_idx,
                    analytic=local_pair[0],
                    numeric=local_pair[1],
                )
            )
            if local_worst > worst_err:
                worst_err = local_worst
                worst_name = name
    report = GradCheckReport(
        entries=entries,
        max_rel_err=worst_err,
        worst=worst_name,
        n_params=total,
        tolerance=tolerance,
    )
    if raise_on_fail and not report.passed:
        raise ToleranceExceeded(worst_name, worst_err, tolerance)
    return report


def standard_grad_checks(
    seed: int = 0, *, raise_on_fail: bool = False
) -> list[tuple[str, GradCheckReport]]:
    """Gradient-check each differentiable fragment on a tiny float64 setup.

    Covers all three item encoders (each under a thousand parameters), the
    user tower under both masks, and the next-item head with its ReLU.
    """
    from .encoders import (
        IdEncoder,
        IdEncoderConfig,
        TextEncoder,
        TextEncoderConfig,
        VisionEncoder,
        VisionEncoderConfig,
    )
    from .user_model import UserEncoder, UserEncoderConfig
    from .blocks import init_parameters

    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    results: list[tuple[str, GradCheckReport]] = []

    text = TextEncoder(
        TextEncoderConfig(vocab_size=12, max_tokens=6, d_model=8, n_layers=1, n_heads=2, ffn_mult=2)
    )
    init_parameters(text, generator)
    text = text.to(torch.float64)
    tokens = torch.randint(0, 12, (2, 6), generator=generator)
    text_mask = torch.ones(2, 6, dtype=torch.bool)
    text_mask[1, 4:] = False
    probe_t = torch.randn(2, 8, dtype=torch.float64, generator=generator)

    def text_loss() -> torch.Tensor:
        return (text(tokens, text_mask) * probe_t).sum()

    results.append(
        ("text_encoder", grad_check(list(text.named_parameters()), text_loss, raise_on_fail=raise_on_fail))
    )

    vision = VisionEncoder(
        VisionEncoderConfig(
            in_channels=1, image_h=6, image_w=6, d_model=8, conv_stages=((4, 2), (6, 2)), mlp_dims=(8, 8)
        )
    )
    init_parameters(vision, generator)
    vision = vision.to(torch.float64)
    pixels = torch.randint(0, 256, (2, 1, 6, 6), generator=generator).to(torch.float64)
    probe_v = torch.randn(2, 8, dtype=torch.float64, generator=generator)

    def vision_loss() -> torch.Tensor:
        return (vision(pixels) * probe_v).sum()

    results.append(
        ("vision_encoder", grad_check(list(vision.named_parameters()), vision_loss, raise_on_fail=raise_on_fail))
    )

    ids = IdEncoder(IdEncoderConfig(n_items=24, d_model=8))
    init_parameters(ids, generator)
    ids = ids.to(torch.float64)
    # a repeated index makes the embedding gradient accumulate across rows
    id_batch = torch.tensor([3, 17, 17, 5])
    probe_i = torch.randn(4, 8, dtype=torch.float64, generator=generator)

    def id_loss() -> torch.Tensor:
        return (ids(id_batch) * probe_i).sum()

    results.append(
        ("id_encoder", grad_check(list(ids.named_parameters()), id_loss, raise_on_fail=raise_on_fail))
    )

    user = UserEncoder(UserEncoderConfig(d_model=8, max_positions=5, n_layers=2, n_heads=2, ffn_mult=2))
    init_parameters(user, generator)
    user = user.to(torch.float64)
    item_vecs = torch.randn(2, 4, 8, dtype=torch.float64, generator=generator).requires_grad_(True)
    seq_mask = torch.ones(2, 4, dtype=torch.bool)
    seq_mask[1, 3:] = False
    target_vecs = torch.randn(2, 2, 8, dtype=torch.float64, generator=generator)
    negative_vecs = torch.randn(2, 3, 8, dtype=torch.float64, generator=generator)

    def contrastive_tower_loss() -> torch.Tensor:
        rep = user(item_vecs, seq_mask, causal=False)
        pos = (target_vecs @ rep.summary[:, :, None]).squeeze(-1)
        neg = (negative_vecs @ rep.summary[:, :, None]).squeeze(-1)
        return contrastive_loss(pos, neg).objective

    named = list(user.named_parameters()) + [("item_vecs", item_vecs)]
    results.append(
        ("user_tower_contrastive", grad_check(named, contrastive_tower_loss, raise_on_fail=raise_on_fail))
    )

    probe_u = torch.randn(2, 4, 8, dtype=torch.float64, generator=generator)

    def causal_tower_loss() -> torch.Tensor:
        rep = user(item_vecs, seq_mask, causal=True)
        return (rep.hidden * probe_u).sum()

    results.append(
        ("user_tower_causal", grad_check(named, causal_tower_loss, raise_on_fail=raise_on_fail))
    )

    head = torch.nn.Linear(8, 20)
    init_parameters(head, generator)
    head = head.to(torch.float64)
    hidden = torch.randn(2, 3, 8, dtype=torch.float64, generator=generator).requires_grad_(True)
    labels = torch.randint(0, 20, (2, 3), generator=generator)
    label_mask = torch.ones(2, 3, dtype=torch.bool)
    label_mask[1, 2] = False

    def head_loss() -> torch.Tensor:
        return next_item_loss(hidden, labels, label_mask, head, apply_relu=True).objective

    named_head = list(head.named_parameters()) + [("hidden_states", hidden)]
    results.append(("next_item_head", grad_check(named_head, head_loss, raise_on_fail=raise_on_fail)))

    return results
