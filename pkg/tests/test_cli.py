import csv
import io
import re

import numpy as np
import pytest

from transrec.cli import EPOCH_CSV_COLUMNS, main
from transrec.evaluation import read_reports
from transrec.pipeline import GradCheckReport

BASE_INI = """\
[run]
seed = 3
precision = f64

[corpus]
world_dir = {world}
n_source_users = 80
n_target_users = 48
n_source_items = 30
n_target_items = 24
min_stream_len = 6
max_stream_len = 12

[encoders]
d_model = 16
text_layers = 1
vision_conv_stages = 4:2,8:2

[user_model]
layers = 1

[pipeline]
max_epochs = 2
batch_size = 32
learning_rate = 0.003
"""

DOMAINS = ("source", "target_mixed", "target_vision", "target_text_feat", "target_shifted")


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    world = root / "world"
    ini = root / "run.ini"
    ini.write_text(BASE_INI.format(world=world), encoding="utf-8")
    code = main(["gen-data", "--config", str(ini), "--output-dir", str(world)])
    assert code == 0
    return root, ini, world


@pytest.fixture(scope="module")
def stage1_dir(workdir):
    root, ini, _ = workdir
    out = root / "stage1"
    code = main(
        ["pretrain-user", "--config", str(ini), "--output-dir", str(out), "--domain", "source"]
    )
    assert code == 0
    return out


@pytest.fixture(scope="module")
def stage2_dir(workdir, stage1_dir):
    root, ini, _ = workdir
    out = root / "stage2"
    code = main(
        [
            "train",
            "--config",
            str(ini),
            "--output-dir",
            str(out),
            "--from-checkpoint",
            str(stage1_dir / "checkpoint.trc"),
        ]
    )
    assert code == 0
    return out


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_writes_every_domain(workdir):
    _, _, world = workdir
    for name in DOMAINS:
        d = world / name
        assert (d / "catalog.jsonl").exists(), name
        assert (d / "interactions.jsonl").exists(), name
        assert (d / "oracle.jsonl").exists(), name
    assert (world / "config.ini").exists()


def test_gen_data_is_reproducible(workdir, tmp_path):
    root, ini, world = workdir
    again = tmp_path / "world2"
    assert main(["gen-data", "--config", str(ini), "--output-dir", str(again)]) == 0
    for name in DOMAINS:
        for fname in ("catalog.jsonl", "interactions.jsonl", "oracle.jsonl"):
            assert (again / name / fname).read_bytes() == (world / name / fname).read_bytes(), (
                name,
                fname,
            )


# ---------------------------------------------------------------------------
# training commands and their artifacts


def test_pretrain_outputs(stage1_dir):
    assert (stage1_dir / "checkpoint.trc").exists()
    assert (stage1_dir / "config.ini").exists()
    manifest = (stage1_dir / "manifest.txt").read_text()
    assert "stage=user_pretrain" in manifest
    assert "model user_encoder.positions.weight" in manifest

    with open(stage1_dir / "epochs.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows, "per-epoch history must not be empty"
    assert list(rows[0]) == EPOCH_CSV_COLUMNS
    assert rows[0]["run_id"] == "stage1"
    assert {r["split"] for r in rows} == {"train", "valid"}

    reports = read_reports(stage1_dir / "metrics.csv")
    assert {r.split for r in reports} == {"valid", "test"}
    assert all(r.domain == "source" for r in reports)


def test_saved_config_reproduces_the_run_hash(stage1_dir, workdir):
    from transrec.runconfig import load_run_config

    saved = load_run_config(stage1_dir / "config.ini", {})
    reloaded_hash = saved.config_hash()
    again = load_run_config(stage1_dir / "config.ini", {})
    assert again.config_hash() == reloaded_hash
    reports = read_reports(stage1_dir / "metrics.csv")
    assert reports[0].config_hash == reloaded_hash


def test_train_consumes_stage1_checkpoint(stage2_dir):
    assert (stage2_dir / "checkpoint.trc").exists()
    manifest = (stage2_dir / "manifest.txt").read_text()
    assert "stage=end_to_end" in manifest


def test_cli_runs_are_deterministic(workdir, stage1_dir, tmp_path):
    root, ini, _ = workdir
    out = tmp_path / "stage1_again"
    code = main(
        ["pretrain-user", "--config", str(ini), "--output-dir", str(out), "--domain", "source"]
    )
    assert code == 0
    a = read_reports(stage1_dir / "metrics.csv")
    b = read_reports(out / "metrics.csv")
    assert [(r.split, r.hr, r.ndcg) for r in a] == [(r.split, r.hr, r.ndcg) for r in b]
    assert (out / "epochs.csv").read_text().replace("stage1_again", "stage1") == (
        stage1_dir / "epochs.csv"
    ).read_text()


def test_stage1_freeze_items_flag(workdir, tmp_path):
    root, ini, _ = workdir
    out = tmp_path / "frozen_stage1"
    code = main(
        [
            "pretrain-user",
            "--config",
            str(ini),
            "--output-dir",
            str(out),
            "--stage1-freeze-items",
        ]
    )
    assert code == 0
    saved = (out / "config.ini").read_text()
    assert "stage1_train_items = false" in saved


@pytest.mark.parametrize("mode", ["finetune", "frozen", "scratch"])
def test_adapt_modes(workdir, stage2_dir, tmp_path, mode):
    root, ini, _ = workdir
    out = tmp_path / f"adapt_{mode}"
    argv = [
        "adapt",
        "--config",
        str(ini),
        "--output-dir",
        str(out),
        "--domain",
        "target_mixed",
        "--mode",
        mode,
    ]
    if mode != "scratch":
        argv += ["--from-checkpoint", str(stage2_dir / "checkpoint.trc")]
    assert main(argv) == 0
    reports = read_reports(out / "metrics.csv")
    assert all(r.domain == "target_mixed" for r in reports)


def test_adapt_single_modality_target(workdir, stage2_dir, tmp_path):
    """A vision-only catalog still loads the text encoder weights so the
    architecture hash keeps matching the source checkpoint."""
    root, ini, _ = workdir
    out = tmp_path / "adapt_vision"
    code = main(
        [
            "adapt",
            "--config",
            str(ini),
            "--output-dir",
            str(out),
            "--domain",
            "target_vision",
            "--mode",
            "finetune",
            "--from-checkpoint",
            str(stage2_dir / "checkpoint.trc"),
        ]
    )
    assert code == 0
    manifest = (out / "manifest.txt").read_text()
    assert "item_tower.encoders.text" in manifest


def test_adapt_fraction(workdir, stage2_dir, tmp_path):
    root, ini, _ = workdir
    out = tmp_path / "adapt_frac"
    code = main(
        [
            "adapt",
            "--config",
            str(ini),
            "--output-dir",
            str(out),
            "--domain",
            "target_mixed",
            "--mode",
            "scratch",
            "--fraction",
            "0.5",
        ]
    )
    assert code == 0
    reports = read_reports(out / "metrics.csv")
    assert reports[0].n_users == 24  # half of the 48 target users


# ---------------------------------------------------------------------------
# eval and compare


def test_eval_writes_full_and_sampled_rows(workdir, stage2_dir, tmp_path):
    root, ini, world = workdir
    sampled_ini = tmp_path / "sampled.ini"
    sampled_ini.write_text(
        (root / "run.ini").read_text() + "\n[eval]\nsampled_candidates = 10\n",
        encoding="utf-8",
    )
    out = tmp_path / "eval_out"
    code = main(
        [
            "eval",
            "--config",
            str(sampled_ini),
            "--output-dir",
            str(out),
            "--split",
            "test",
            "--from-checkpoint",
            str(stage2_dir / "checkpoint.trc"),
        ]
    )
    assert code == 0
    reports = read_reports(out / "eval_metrics.csv")
    splits = [r.split for r in reports]
    assert splits == ["test", "test~sampled10"]
    full, sampled = reports
    assert sampled.hr >= full.hr  # candidate sampling inflates the metric


def test_eval_requires_checkpoint(workdir, tmp_path):
    root, ini, _ = workdir
    out = tmp_path / "eval_none"
    code = main(["eval", "--config", str(ini), "--output-dir", str(out)])
    assert code == 1


def test_compare_command(workdir, stage1_dir, stage2_dir, capsys):
    code = main(
        [
            "compare",
            str(stage1_dir / "metrics.csv"),
            str(stage2_dir / "metrics.csv"),
            "--split",
            "test",
        ]
    )
    assert code == 0
    table = capsys.readouterr().out
    assert table.count("|") >= 8
    assert re.search(r"[+-]\d+\.\d+%", table)


def test_compare_missing_split(stage1_dir, stage2_dir):
    code = main(
        [
            "compare",
            str(stage1_dir / "metrics.csv"),
            str(stage2_dir / "metrics.csv"),
            "--split",
            "nope",
        ]
    )
    assert code == 2


# ---------------------------------------------------------------------------
# convergence merge


def test_convergence_merges_run_histories(stage1_dir, stage2_dir, capsys):
    code = main(["convergence", str(stage1_dir), str(stage2_dir)])
    assert code == 0
    out = capsys.readouterr().out
    rows = list(csv.DictReader(io.StringIO(out)))
    run_ids = {r["run_id"] for r in rows}
    assert run_ids == {"stage1", "stage2"}
    n1 = sum(1 for _ in open(stage1_dir / "epochs.csv")) - 1
    n2 = sum(1 for _ in open(stage2_dir / "epochs.csv")) - 1
    assert len(rows) == n1 + n2


def test_convergence_missing_dir(tmp_path):
    assert main(["convergence", str(tmp_path / "ghost")]) == 2


# ---------------------------------------------------------------------------
# grad-check plumbing


def test_grad_check_requires_f64(workdir, tmp_path):
    f32_ini = tmp_path / "f32.ini"
    f32_ini.write_text("[run]\nprecision = f32\n", encoding="utf-8")
    assert main(["grad-check", "--config", str(f32_ini)]) == 1


def test_grad_check_reports_failure_as_exit_4(workdir, monkeypatch, capsys):
    root, ini, _ = workdir

    def fake_checks(seed, raise_on_fail=False):
        report = GradCheckReport(
            entries=[], max_rel_err=0.5, worst="w", n_params=3, tolerance=1e-4
        )
        return [("broken_fragment", report)]

    import transrec.cli as cli_mod

    monkeypatch.setattr(cli_mod, "standard_grad_checks", fake_checks)
    assert main(["grad-check", "--config", str(ini)]) == 4
    assert "FAIL broken_fragment" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# exit codes


def test_exit_code_config_error(tmp_path):
    # no data configured at all
    out = tmp_path / "nowhere"
    assert main(["pretrain-user", "--output-dir", str(out)]) == 1


def test_exit_code_data_error(workdir, tmp_path):
    root, ini, _ = workdir
    out = tmp_path / "missing_domain"
    code = main(
        [
            "pretrain-user",
            "--config",
            str(ini),
            "--output-dir",
            str(out),
            "--domain",
            "no_such_domain",
        ]
    )
    assert code == 2


def test_exit_code_training_error(workdir, tmp_path, monkeypatch):
    from transrec.errors import DivergedLoss

    root, ini, _ = workdir
    import transrec.cli as cli_mod

    def explode(*args, **kwargs):
        raise DivergedLoss(1, 1, "loss became nan")

    monkeypatch.setattr(cli_mod, "pretrain_user_encoder", explode)
    out = tmp_path / "diverged"
    assert main(["pretrain-user", "--config", str(ini), "--output-dir", str(out)]) == 3


def test_bad_mode_is_a_config_error(workdir, stage2_dir, tmp_path):
    root, ini, _ = workdir
    code = main(
        [
            "adapt",
            "--config",
            str(ini),
            "--output-dir",
            str(tmp_path / "x"),
            "--domain",
            "target_mixed",
            "--mode",
            "warmstart",
            "--from-checkpoint",
            str(stage2_dir / "checkpoint.trc"),
        ]
    )
    assert code == 1


def test_adapt_without_checkpoint_is_a_config_error(workdir, tmp_path):
    root, ini, _ = workdir
    code = main(
        [
            "adapt",
            "--config",
            str(ini),
            "--output-dir",
            str(tmp_path / "y"),
            "--domain",
            "target_mixed",
            "--mode",
            "finetune",
        ]
    )
    assert code == 1
