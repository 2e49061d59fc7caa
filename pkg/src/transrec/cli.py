"""Command-line entry points.

Exit codes: 1 for configuration problems, 2 for data problems, 3 for
training divergence, 4 for failed numerical verification.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import torch

from . import corpus
from .checkpoint import load_checkpoint, manifest_text, save_checkpoint
from .encoders import CatalogTensors
from .errors import (
    ConfigError,
    ConfigInvalid,
    DataError,
    MissingCheckpoint,
    MissingHistory,
    ToleranceExceeded,
    TrainingError,
    TransRecError,
    VerificationError,
)
from .evaluation import (
    compare,
    evaluate,
    evaluate_sampled,
    read_reports,
    write_reports,
)
from .model import TransRecModel
from .pipeline import (
    EpochRecord,
    TransferMode,
    adapt_to_target,
    pretrain_user_encoder,
    standard_grad_checks,
    train_end_to_end,
    transfer_model_config,
)
from .runconfig import RunConfig, load_run_config

EPOCH_CSV_COLUMNS = ["run_id", "epoch", "split", "loss", "hr", "ndcg"]


class EpochCsvWriter:
    """Append one line per epoch record; each line is a single write."""

    def __init__(self, path: Path, run_id: str):
        self.path = Path(path)
        self.run_id = run_id
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            with open(self.path, "w", encoding="utf-8") as fh:
                fh.write(",".join(EPOCH_CSV_COLUMNS) + "\n")

    def __call__(self, record: EpochRecord) -> None:
        cells = [
            self.run_id,
            str(record.epoch),
            record.split,
            "" if record.loss is None else f"{record.loss:.6f}",
            "" if record.hr is None else f"{record.hr:.6f}",
            "" if record.ndcg is None else f"{record.ndcg:.6f}",
        ]
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(",".join(cells) + "\n")
            fh.flush()


def _overrides_from(args: argparse.Namespace) -> dict[tuple[str, str], str]:
    overrides: dict[tuple[str, str], str] = {}
    if getattr(args, "seed", None) is not None:
        overrides[("run", "seed")] = str(args.seed)
    if getattr(args, "output_dir", None) is not None:
        overrides[("run", "output_dir")] = args.output_dir
    if getattr(args, "fraction", None) is not None:
        overrides[("corpus", "fraction")] = args.fraction
    if getattr(args, "domain", None) is not None:
        overrides[("corpus", "domain")] = args.domain
    if getattr(args, "k", None) is not None:
        overrides[("eval", "k")] = str(args.k)
    if getattr(args, "mask_history", False):
        overrides[("eval", "mask_history")] = "true"
    if getattr(args, "stage1_freeze_items", False):
        overrides[("pipeline", "stage1_train_items")] = "false"
    return overrides


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    return load_run_config(getattr(args, "config", None), _overrides_from(args))


def _load_dataset(cfg: RunConfig) -> corpus.Dataset:
    paths = cfg.data_paths()
    if paths is None:
        raise ConfigInvalid(
            "corpus",
            "no data configured: set corpus.catalog and corpus.interactions, or "
            "corpus.world_dir plus corpus.domain (gen-data writes a world_dir)",
        )
    catalog_path, interactions_path = paths
    vocab_size = None
    if cfg.raw("encoders", "item_encoder") == "content" and cfg.raw(
        "encoders", "text_enabled"
    ).lower() in ("auto", "true", "1", "yes"):
        vocab_size = int(cfg.raw("encoders", "text_vocab_size"))
    image_shape = None
    if cfg.raw("encoders", "vision_image_shape") != "auto":
        image_shape = cfg._shape("encoders", "vision_image_shape")
    catalog = corpus.load_catalog(catalog_path, vocab_size=vocab_size, image_shape=image_shape)
    dataset = corpus.load_interactions(
        interactions_path, catalog, max_seq_len=cfg.max_seq_len, domain=cfg.domain
    )
    fraction = cfg.fraction
    if fraction != 1.0:
        dataset = corpus.subsample(dataset, fraction, cfg.seed)
    return dataset


def _final_reports(cfg: RunConfig, result, dataset: corpus.Dataset, out: Path) -> None:
    split_view = corpus.leave_one_out_split(dataset)
    tensors = CatalogTensors(dataset)
    reports = [
        evaluate(
            result.model,
            dataset,
            split_view,
            split=split,
            k=cfg.eval_k,
            mask_history=cfg.mask_history,
            run_id=cfg.run_id,
            config_hash=cfg.config_hash(),
            tensors=tensors,
        )
        for split in ("valid", "test")
    ]
    write_reports(reports, out / "metrics.csv")
    for report in reports:
        print(
            f"{report.split}: HR@{report.k}={report.hr:.4f} NDCG@{report.k}={report.ndcg:.4f} "
            f"({report.n_users} users)"
        )


def _prepare_out(cfg: RunConfig) -> Path:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.ini")
    return out


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    out = _prepare_out(cfg)
    world = corpus.generate_synthetic_world(cfg.synthetic_config())
    for name, dataset in world.domains().items():
        domain_dir = out / name
        corpus.write_domain_dir(dataset, domain_dir)
        corpus.write_oracle(world.oracle, domain_dir / "oracle.jsonl", dataset)
        print(f"wrote {domain_dir} ({dataset.n_users} users, {dataset.n_items} items)")
    print(f"point corpus.world_dir at {out} to train on these domains")
    return 0


def cmd_pretrain_user(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    out = _prepare_out(cfg)
    dataset = _load_dataset(cfg)
    result = pretrain_user_encoder(
        dataset,
        cfg.model_config(dataset),
        cfg.train_config(),
        dtype=cfg.dtype(),
        seed=cfg.seed,
        on_epoch=EpochCsvWriter(out / "epochs.csv", cfg.run_id),
    )
    save_checkpoint(result.checkpoint, out / "checkpoint.trc")
    (out / "manifest.txt").write_text(manifest_text(result.checkpoint), encoding="utf-8")
    _final_reports(cfg, result, dataset, out)
    print(f"wrote {out / 'checkpoint.trc'} (best epoch {result.best_epoch})")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    out = _prepare_out(cfg)
    dataset = _load_dataset(cfg)
    init = load_checkpoint(args.from_checkpoint) if args.from_checkpoint else None
    result = train_end_to_end(
        dataset,
        cfg.model_config(dataset),
        cfg.train_config(),
        dtype=cfg.dtype(),
        seed=cfg.seed,
        init=init,
        force_compat=args.force_compat,
        on_epoch=EpochCsvWriter(out / "epochs.csv", cfg.run_id),
    )
    save_checkpoint(result.checkpoint, out / "checkpoint.trc")
    (out / "manifest.txt").write_text(manifest_text(result.checkpoint), encoding="utf-8")
    _final_reports(cfg, result, dataset, out)
    print(f"wrote {out / 'checkpoint.trc'} (best epoch {result.best_epoch})")
    return 0


def _modality_overrides(ckpt, dataset: corpus.Dataset, cfg: RunConfig) -> dict:
    """Align the target model's configured encoders with a source checkpoint.

    The checkpoint's tensor names say which encoders the source model had;
    a single-modality target catalog must not silently drop one, or the
    architecture hash stops matching and nothing loads.
    """
    if cfg.raw("encoders", "item_encoder") != "content":
        return {}
    has_text = any(n.startswith("item_tower.encoders.text.") for n in ckpt.tensors)
    conv1 = ckpt.tensors.get("item_tower.encoders.vision.stages.0.conv1.weight")
    extra = {
        ("encoders", "text_enabled"): "true" if has_text else "false",
        ("encoders", "vision_enabled"): "true" if conv1 is not None else "false",
    }
    if conv1 is not None and cfg.raw("encoders", "vision_image_shape") == "auto":
        has_images = any(
            item.modality is corpus.Modality.VISION for item in dataset.catalog.values()
        )
        if not has_images:
            # nothing will route to the conv stack; any legal size validates it
            extra[("encoders", "vision_image_shape")] = f"{int(conv1.shape[1])},8,8"
    return extra


def cmd_adapt(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    try:
        mode = TransferMode(args.mode)
    except ValueError:
        raise ConfigInvalid(
            "--mode", f"must be one of scratch/finetune/frozen, got {args.mode!r}"
        ) from None
    if mode is not TransferMode.SCRATCH and not args.from_checkpoint:
        raise MissingCheckpoint(
            f"--mode {mode.value} requires --from-checkpoint pointing at a source checkpoint"
        )
    dataset = _load_dataset(cfg)
    pretrained = load_checkpoint(args.from_checkpoint) if args.from_checkpoint else None
    if pretrained is not None and mode is not TransferMode.SCRATCH:
        extra = _modality_overrides(pretrained, dataset, cfg)
        if extra:
            cfg = load_run_config(
                getattr(args, "config", None), {**_overrides_from(args), **extra}
            )
    out = _prepare_out(cfg)
    result = adapt_to_target(
        dataset,
        cfg.model_config(dataset),
        cfg.train_config(),
        mode=mode,
        dtype=cfg.dtype(),
        seed=cfg.seed,
        pretrained=pretrained,
        force_compat=args.force_compat,
        on_epoch=EpochCsvWriter(out / "epochs.csv", cfg.run_id),
    )
    save_checkpoint(result.checkpoint, out / "checkpoint.trc")
    (out / "manifest.txt").write_text(manifest_text(result.checkpoint), encoding="utf-8")
    if result.apply_report is not None and result.apply_report.fresh:
        print("fresh target-specific tensors: " + ", ".join(result.apply_report.fresh))
    _final_reports(cfg, result, dataset, out)
    print(f"wrote {out / 'checkpoint.trc'} (best epoch {result.best_epoch})")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    if not args.from_checkpoint:
        raise MissingCheckpoint("eval requires --from-checkpoint")
    out = _prepare_out(cfg)
    dataset = _load_dataset(cfg)
    ckpt = load_checkpoint(args.from_checkpoint)
    model = TransRecModel(cfg.model_config(dataset), dataset.n_items, cfg.dtype(), cfg.seed)
    from .checkpoint import apply_checkpoint

    apply_checkpoint(model, ckpt, expected_hash=model.arch_hash, force_compat=args.force_compat)
    split_view = corpus.leave_one_out_split(dataset)
    tensors = CatalogTensors(dataset)
    reports = [
        evaluate(
            model,
            dataset,
            split_view,
            split=args.split,
            k=cfg.eval_k,
            mask_history=cfg.mask_history,
            run_id=cfg.run_id,
            config_hash=cfg.config_hash(),
            tensors=tensors,
        )
    ]
    if cfg.sampled_candidates > 0:
        reports.append(
            evaluate_sampled(
                model,
                dataset,
                split_view,
                split=args.split,
                k=cfg.eval_k,
                n_sampled=cfg.sampled_candidates,
                seed=cfg.seed,
                run_id=cfg.run_id,
                config_hash=cfg.config_hash(),
                tensors=tensors,
            )
        )
    write_reports(reports, out / "eval_metrics.csv")
    for report in reports:
        print(
            f"{report.split}: HR@{report.k}={report.hr:.4f} NDCG@{report.k}={report.ndcg:.4f} "
            f"({report.n_users} users)"
        )
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    def pick(path: str):
        reports = [r for r in read_reports(path) if r.split == args.split]
        if not reports:
            raise MissingHistory(f"{path} (no rows for split {args.split!r})")
        return reports[0]

    result = compare(pick(args.baseline), pick(args.challenger))
    sys.stdout.write(result.to_markdown())
    return 0


def cmd_grad_check(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    if cfg.dtype() != torch.float64:
        raise ConfigInvalid(
            "precision",
            "gradient checking needs 64-bit floats: set TRANSREC_PRECISION=f64 "
            "or [run] precision = f64",
        )
    results = standard_grad_checks(cfg.seed, raise_on_fail=False)
    failed = None
    for name, report in results:
        status = "PASS" if report.passed else "FAIL"
        print(
            f"{status} {name}: {report.n_params} params, max rel err "
            f"{report.max_rel_err:.3e} at {report.worst}"
        )
        if not report.passed and failed is None:
            failed = (name, report)
    if failed is not None:
        name, report = failed
        raise ToleranceExceeded(f"{name}:{report.worst}", report.max_rel_err, report.tolerance)
    return 0


def cmd_convergence(args: argparse.Namespace) -> int:
    writer = csv.writer(sys.stdout)
    writer.writerow(EPOCH_CSV_COLUMNS)
    for run_dir in args.run_dirs:
        path = Path(run_dir) / "epochs.csv"
        if not path.exists():
            raise MissingHistory(str(run_dir))
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                writer.writerow([row.get(col, "") for col in EPOCH_CSV_COLUMNS])
    return 0


def cmd_experiment_matrix(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    out = _prepare_out(cfg)
    fractions = []
    for chunk in (args.fraction or "1.0").split(","):
        chunk = chunk.strip()
        if chunk:
            try:
                fractions.append(float(chunk))
            except ValueError:
                raise ConfigInvalid("--fraction", f"expected numbers, got {chunk!r}") from None
    world = corpus.generate_synthetic_world(cfg.synthetic_config())
    train_cfg = cfg.train_config()
    dtype = cfg.dtype()
    source = world.source
    model_cfg = cfg.model_config(source)

    stage1 = pretrain_user_encoder(
        source,
        model_cfg,
        train_cfg,
        dtype=dtype,
        seed=cfg.seed,
        on_epoch=EpochCsvWriter(out / "cells" / "source-stage1" / "epochs.csv", "source-stage1"),
    )
    save_checkpoint(stage1.checkpoint, out / "source_stage1.trc")
    stage2 = train_end_to_end(
        source,
        model_cfg,
        train_cfg,
        dtype=dtype,
        seed=cfg.seed,
        init=stage1.checkpoint,
        on_epoch=EpochCsvWriter(out / "cells" / "source-stage2" / "epochs.csv", "source-stage2"),
    )
    save_checkpoint(stage2.checkpoint, out / "source_stage2.trc")
    print(f"source pretraining done (valid HR@{train_cfg.valid_k} {stage2.best_valid_hr:.4f})")

    reports = []
    for target in world.targets:
        for fraction in fractions:
            dataset = corpus.subsample(target, fraction, cfg.seed) if fraction != 1.0 else target
            cell_cfg = transfer_model_config(model_cfg, dataset)
            for mode in TransferMode:
                run_id = f"{target.domain}-{mode.value}-f{round(fraction * 100)}"
                result = adapt_to_target(
                    dataset,
                    cell_cfg,
                    train_cfg,
                    mode=mode,
                    dtype=dtype,
                    seed=cfg.seed,
                    pretrained=None if mode is TransferMode.SCRATCH else stage2.checkpoint,
                    on_epoch=EpochCsvWriter(out / "cells" / run_id / "epochs.csv", run_id),
                )
                split_view = corpus.leave_one_out_split(dataset)
                report = evaluate(
                    result.model,
                    dataset,
                    split_view,
                    split="test",
                    k=cfg.eval_k,
                    mask_history=cfg.mask_history,
                    run_id=run_id,
                    config_hash=cfg.config_hash(),
                )
                reports.append(report)
                print(f"{run_id}: test HR@{report.k}={report.hr:.4f} NDCG@{report.k}={report.ndcg:.4f}")
    write_reports(reports, out / "matrix.csv")

    lines = ["| domain | fraction | " + " | ".join(m.value for m in TransferMode) + " |"]
    lines.append("| --- | --- | " + " | ".join("---" for _ in TransferMode) + " |")
    for target in world.targets:
        for fraction in fractions:
            cells = []
            for mode in TransferMode:
                run_id = f"{target.domain}-{mode.value}-f{round(fraction * 100)}"
                match = [r for r in reports if r.run_id == run_id]
                cells.append(f"{match[0].hr:.4f}" if match else "-")
            lines.append(f"| {target.domain} | {fraction:.2f} | " + " | ".join(cells) + " |")
    (out / "matrix.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {out / 'matrix.csv'} and {out / 'matrix.md'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="transrec",
        description="Two-tower content recommender: synthesis, pretraining, transfer, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, *, checkpoint: bool = False) -> None:
        p.add_argument("--config", help="INI config file; omitted keys use defaults")
        p.add_argument("--seed", type=int, help="overrides [run] seed")
        p.add_argument("--output-dir", help="overrides [run] output_dir")
        p.add_argument("--domain", help="overrides [corpus] domain")
        p.add_argument("--fraction", help="overrides [corpus] fraction (user subsample)")
        p.add_argument("--k", type=int, help="overrides [eval] k")
        p.add_argument(
            "--mask-history",
            action="store_true",
            help="exclude each user's context items from the candidate pool",
        )
        if checkpoint:
            p.add_argument("--from-checkpoint", help="checkpoint file to initialize from")
            p.add_argument(
                "--force-compat",
                action="store_true",
                help="load a checkpoint even when its architecture hash differs",
            )

    p = sub.add_parser("gen-data", help="generate the synthetic source and target domains")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-user", help="stage one: next-item pretraining on the source")
    common(p)
    p.add_argument(
        "--stage1-freeze-items",
        action="store_true",
        help="train only the user tower and head during stage one",
    )
    p.set_defaults(func=cmd_pretrain_user)

    p = sub.add_parser("train", help="stage two: contrastive training on the source")
    common(p, checkpoint=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="train on a target domain (scratch/finetune/frozen)")
    common(p, checkpoint=True)
    p.add_argument("--mode", required=True, help="scratch, finetune, or frozen")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="rank held-out items with a saved checkpoint")
    common(p, checkpoint=True)
    p.add_argument("--split", default="test", choices=("valid", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="relative improvement between two metric reports")
    p.add_argument("baseline")
    p.add_argument("challenger")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification (needs f64)")
    common(p)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("convergence", help="merge per-epoch CSVs from runs onto stdout")
    p.add_argument("run_dirs", nargs="+")
    p.set_defaults(func=cmd_convergence)

    p = sub.add_parser("experiment-matrix", help="targets x transfer modes x fractions grid")
    common(p)
    p.set_defaults(func=cmd_experiment_matrix)

    return parser


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return 3
    except VerificationError as exc:
        print(f"verification error: {exc}", file=sys.stderr)
        return 4
    except TransRecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
