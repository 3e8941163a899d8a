"""CLI and orchestration tests, all at smoke scale."""

import json
from pathlib import Path

import numpy as np
import pytest

from motiongen import envs, harness
from motiongen import denoiser as dn
from motiongen import training as tr


def run_cli(*argv):
    return harness.main(list(argv))


@pytest.fixture(scope="module")
def smoke_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "demos"
    code = run_cli(
        "gen-demos", "--preset", "smoke", "--task", "obstacle",
        "--count", "8", "--seed", "0", "--out", str(out),
    )
    assert code == 0
    return out


class TestGenDemos:
    def test_manifest_episode_count(self, smoke_dataset):
        manifest = json.loads((smoke_dataset / "manifest.json").read_text())
        assert len(manifest["episodes"]) == 8

    def test_zero_count_usage_error(self, tmp_path, capsys):
        code = run_cli(
            "gen-demos", "--task", "obstacle", "--count", "0",
            "--out", str(tmp_path / "x"),
        )
        assert code != 0
        err = capsys.readouterr().err
        assert err.strip().startswith("error:") and len(err.strip().splitlines()) == 1

    def test_same_flags_identical_files(self, smoke_dataset, tmp_path):
        out2 = tmp_path / "again"
        assert run_cli(
            "gen-demos", "--preset", "smoke", "--task", "obstacle",
            "--count", "8", "--seed", "0", "--out", str(out2),
        ) == 0
        for name in sorted(p.name for p in smoke_dataset.iterdir()):
            assert (out2 / name).read_bytes() == (smoke_dataset / name).read_bytes()

    def test_missing_subcommand_fails(self, capsys):
        assert run_cli() != 0


class TestTrainCommand:
    def test_smoke_train_writes_checkpoints_and_log(self, smoke_dataset, tmp_path):
        out = tmp_path / "run"
        code = run_cli(
            "train", "--preset", "smoke", "--data", str(smoke_dataset),
            "--variant", "prodmp", "--out", str(out),
        )
        assert code == 0
        assert (out / "seed_0" / "best.ckpt").exists()
        assert (out / "seed_0" / "last.ckpt").exists()
        log = (out / "seed_0" / "train_log.csv").read_text().strip().splitlines()
        assert log[0] == "epoch,loss,success"
        assert len(log) == 41
        losses = [float(r.split(",")[1]) for r in log[1:]]
        assert losses[-1] < losses[0]
        assert (out / "resolved_config.json").exists()

    def test_resume_reproduces_loss_stream(self, smoke_dataset, tmp_path):
        full = tmp_path / "full"
        code = run_cli(
            "train", "--preset", "smoke", "--data", str(smoke_dataset),
            "--variant", "prodmp", "--epochs", "40", "--out", str(full),
        )
        assert code == 0

        half = tmp_path / "half"
        code = run_cli(
            "train", "--preset", "smoke", "--data", str(smoke_dataset),
            "--variant", "prodmp", "--epochs", "20", "--out", str(half),
        )
        assert code == 0
        code = run_cli(
            "train", "--preset", "smoke", "--data", str(smoke_dataset),
            "--variant", "prodmp", "--epochs", "40", "--out", str(half), "--resume",
        )
        assert code == 0

        log_full = (full / "seed_0" / "train_log.csv").read_text().splitlines()
        log_half = (half / "seed_0" / "train_log.csv").read_text().splitlines()
        # Resumed rows cover epochs 21..40 and must match the uninterrupted run.
        assert log_half[1:] == log_full[21:]

    def test_bc_variant_trains(self, smoke_dataset, tmp_path):
        out = tmp_path / "bc"
        code = run_cli(
            "train", "--preset", "smoke", "--data", str(smoke_dataset),
            "--variant", "bc", "--epochs", "20", "--out", str(out),
        )
        assert code == 0
        bundle = dn.load_checkpoint(out / "seed_0" / "best.ckpt")
        assert bundle.variant == "bc"


@pytest.fixture(scope="module")
def trained(smoke_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    code = run_cli(
        "train", "--preset", "smoke", "--data", str(smoke_dataset),
        "--variant", "prodmp", "--out", str(out),
    )
    assert code == 0
    return out / "seed_0" / "best.ckpt"


class TestEvalCommand:
    def test_eval_outputs(self, smoke_dataset, trained, tmp_path):
        out = tmp_path / "eval"
        code = run_cli(
            "eval", "--preset", "smoke", "--ckpt", str(trained),
            "--task", "obstacle", "--data", str(smoke_dataset),
            "--n-rollouts", "4", "--seed", "1", "--out", str(out),
        )
        assert code == 0
        curve = (out / "success_vs_threshold_prodmp.csv").read_text().splitlines()
        assert curve[0] == "threshold,success_rate"
        rates = [float(r.split(",")[1]) for r in curve[1:]]
        assert all(b >= a for a, b in zip(rates, rates[1:]))
        assert (out / "metrics_prodmp.csv").exists()
        comparison = (out / "comparison.csv").read_text().splitlines()
        assert comparison[0].startswith("variant,success_rate")
        assert len(comparison) == 2

    def test_eval_determinism(self, smoke_dataset, trained, tmp_path):
        outs = []
        for name in ("e1", "e2"):
            out = tmp_path / name
            code = run_cli(
                "eval", "--preset", "smoke", "--ckpt", str(trained),
                "--task", "obstacle", "--data", str(smoke_dataset),
                "--n-rollouts", "3", "--seed", "5", "--out", str(out),
            )
            assert code == 0
            outs.append(out)
        for name in ("success_vs_threshold_prodmp.csv", "metrics_prodmp.csv", "comparison.csv"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    def test_rollout_command(self, trained, tmp_path):
        out = tmp_path / "ro"
        code = run_cli(
            "rollout", "--preset", "smoke", "--ckpt", str(trained),
            "--task", "obstacle", "--n-rollouts", "2", "--seed", "2",
            "--out", str(out),
        )
        assert code == 0
        assert (out / "trace_000.csv").exists()
        assert (out / "metrics.csv").exists()

    def test_missing_checkpoint_single_line_error(self, tmp_path, capsys):
        code = run_cli(
            "eval", "--ckpt", str(tmp_path / "nope.ckpt"),
            "--task", "obstacle", "--out", str(tmp_path / "out"),
        )
        assert code != 0
        err = capsys.readouterr().err.strip()
        assert err.startswith("error:") and len(err.splitlines()) == 1


class TestSweep:
    def test_sweep_rows_and_nesting(self, smoke_dataset, tmp_path):
        out = tmp_path / "sweep"
        code = run_cli(
            "sweep-demos", "--preset", "smoke", "--data", str(smoke_dataset),
            "--variants", "prodmp", "--seed", "0", "--out", str(out),
        )
        assert code == 0
        rows = (out / "sweep_prodmp.csv").read_text().strip().splitlines()
        assert rows[0] == "demos,success_rate"
        assert len(rows) == 3  # counts 4 and 8

        dataset = envs.read_dataset(smoke_dataset)
        small = harness.shuffled_prefix(dataset, 4, 0)
        large = harness.shuffled_prefix(dataset, 8, 0)
        small_ids = [ep.seed for ep in small.episodes]
        large_ids = [ep.seed for ep in large.episodes]
        assert small_ids == large_ids[:4]


class TestConfigHandling:
    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"not_a_key": 1}')
        code = run_cli(
            "gen-demos", "--config", str(cfg), "--task", "obstacle",
            "--count", "2", "--out", str(tmp_path / "x"),
        )
        assert code != 0

    def test_config_file_overrides(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"demo_count": 3}')
        out = tmp_path / "d"
        code = run_cli(
            "gen-demos", "--config", str(cfg), "--task", "obstacle",
            "--seed", "0", "--out", str(out),
        )
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["episodes"]) == 3
