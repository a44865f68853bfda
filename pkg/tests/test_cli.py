"""Command-line behaviour: exit codes, artifacts, determinism."""

import csv
import hashlib
import json
from pathlib import Path

import pytest

from pstmae import cli
from pstmae import data

TINY = {
    "dataset": {"sequences": 10, "grid": 16, "frames": 17},
    "model": {"latent_dim": 16, "channels": [8, 16], "heads": 2,
              "encoder_depth": 1, "decoder_depth": 1},
    "train": {"epochs": 1, "epochs_cae": 1, "batch": 4},
}


def write_cfg(tmp_path, extra=None, name="cfg.json"):
    cfg = json.loads(json.dumps(TINY))
    for section, vals in (extra or {}).items():
        cfg.setdefault(section, {}).update(vals)
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def tree_hash(root):
    digest = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            digest.update(p.name.encode())
            digest.update(p.read_bytes())
    return digest.hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One generated dataset plus trained checkpoints, shared by tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(root)
    run = root / "run"
    assert cli.main(["generate", "--kind", "swe", "--config", str(cfg), "--out", str(run)]) == 0
    assert cli.main(["train-cae", "--config", str(cfg), "--data", str(run), "--out", str(run)]) == 0
    assert cli.main(["train-pstmae", "--config", str(cfg), "--data", str(run), "--out", str(run)]) == 0
    assert cli.main(["train-baseline", "--config", str(cfg), "--data", str(run), "--out", str(run)]) == 0
    return root, cfg, run


class TestGenerate:
    def test_artifact_count_and_manifest(self, pipeline):
        _, _, run = pipeline
        files = sorted((run / "data").glob("*.fsq"))
        assert len(files) == 10
        manifest = data.read_manifest(run / "data")
        assert len(manifest) == 10
        assert {e["split"] for e in manifest} == {"train", "val", "test"}

    def test_rerun_same_seed_identical_bytes(self, pipeline, tmp_path):
        root, cfg, run = pipeline
        out2 = tmp_path / "again"
        assert cli.main(["generate", "--kind", "swe", "--config", str(cfg), "--out", str(out2)]) == 0
        assert tree_hash(run / "data") == tree_hash(out2 / "data")

    def test_strict_rejects_out_of_range_friction(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, {"dataset": {"params": {"friction": 3.0}}})
        rc = cli.main(["generate", "--kind", "swe", "--config", str(cfg),
                       "--out", str(tmp_path / "o"), "--strict"])
        assert rc == 2
        assert "friction" in capsys.readouterr().err

    def test_unstable_solver_exits_3(self, tmp_path):
        cfg = write_cfg(tmp_path, {"dataset": {"params": {"dt": 50.0}}})
        rc = cli.main(["generate", "--kind", "swe", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert rc == 3

    def test_dr_generation(self, tmp_path):
        cfg = write_cfg(tmp_path, {"dataset": {"sequences": 10, "frames": 16}})
        rc = cli.main(["generate", "--kind", "dr", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert rc == 0
        manifest = data.read_manifest(tmp_path / "o" / "data")
        assert manifest[0]["kind"] == "dr"

    def test_parallel_generation_matches_serial(self, pipeline, tmp_path):
        root, cfg, run = pipeline
        out2 = tmp_path / "par"
        assert cli.main(["generate", "--kind", "swe", "--config", str(cfg),
                         "--out", str(out2), "--jobs", "2"]) == 0
        assert tree_hash(run / "data") == tree_hash(out2 / "data")

    def test_env_seed_override(self, tmp_path, monkeypatch):
        cfg = write_cfg(tmp_path)
        monkeypatch.setenv("PSTMAE_SEED", "77")
        assert cli.main(["generate", "--kind", "swe", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
        monkeypatch.delenv("PSTMAE_SEED")
        assert cli.main(["generate", "--kind", "swe", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
        ha = tree_hash(tmp_path / "a" / "data")
        hb = tree_hash(tmp_path / "b" / "data")
        assert ha != hb
        resolved = json.loads((tmp_path / "a" / "resolved_config.json").read_text())
        assert resolved["config"]["seed"] == 77


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"dataset": {"volume": 11}}))
        rc = cli.main(["generate", "--kind", "swe", "--config", str(p), "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "volume" in capsys.readouterr().err

    def test_resolved_copy_written(self, pipeline):
        _, _, run = pipeline
        resolved = json.loads((run / "resolved_config.json").read_text())
        assert "config" in resolved and "command" in resolved

    def test_missing_dataset_path_names_it(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        rc = cli.main(["train-cae", "--config", str(cfg), "--data", str(tmp_path / "nope"),
                       "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "nope" in capsys.readouterr().err


class TestTrainCommands:
    def test_epochs_flag_and_loss_rows(self, pipeline, tmp_path):
        root, cfg, run = pipeline
        out = tmp_path / "t"
        rc = cli.main(["train-cae", "--config", str(cfg), "--data", str(run),
                       "--out", str(out), "--epochs", "2"])
        assert rc == 0
        with open(out / "reports" / "cae_loss.csv") as f:
            lines = list(csv.reader(f))
        assert len(lines) - 1 == 2 * 2  # epochs x {train,val}

    def test_artifacts_exist(self, pipeline):
        _, _, run = pipeline
        for name in ("cae.ckpt", "pstmae.ckpt", "lstm.ckpt"):
            assert (run / "ckpt" / name).is_file()
        for name in ("cae_loss.csv", "pstmae_loss.csv", "lstm_loss.csv"):
            assert (run / "reports" / name).is_file()

    def test_resume_runs(self, pipeline, tmp_path):
        root, cfg, run = pipeline
        out = tmp_path / "r"
        rc = cli.main(["train-pstmae", "--config", str(cfg), "--data", str(run), "--out", str(out),
                       "--cae", str(run / "ckpt" / "cae.ckpt"),
                       "--resume", str(run / "ckpt" / "pstmae.ckpt"), "--epochs", "1"])
        assert rc == 0


class TestEvaluate:
    def test_report_and_determinism(self, pipeline, tmp_path):
        _, _, run = pipeline
        outs = []
        for name in ("e1", "e2"):
            out = tmp_path / name
            rc = cli.main(["evaluate", "--checkpoint", str(run / "ckpt" / "pstmae.ckpt"),
                           "--data", str(run), "--out", str(out), "--split", "test",
                           "--persistence"])
            assert rc == 0
            outs.append((out / "reports" / "pstmae_test_report.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_aggregates_equal_weighted_means(self, pipeline, tmp_path):
        _, _, run = pipeline
        out = tmp_path / "agg"
        cli.main(["evaluate", "--checkpoint", str(run / "ckpt" / "pstmae.ckpt"),
                  "--data", str(run), "--out", str(out), "--split", "test"])
        with open(out / "reports" / "pstmae_test_report.csv") as f:
            rows = list(csv.DictReader(f))
        per_step = [r for r in rows if r["step"] not in ("all",) and r["variable"] != "all"]
        overall = [r for r in rows if r["variable"] == "all" and r["step"] == "all"][0]
        total = sum(int(r["count"]) for r in per_step)
        want = sum(float(r["mse"]) * int(r["count"]) for r in per_step) / total
        assert abs(float(overall["mse"]) - want) < 1e-12
        assert int(overall["count"]) == total

    def test_cae_checkpoint_reconstruction_rows(self, pipeline, tmp_path):
        _, _, run = pipeline
        out = tmp_path / "cae_eval"
        rc = cli.main(["evaluate", "--checkpoint", str(run / "ckpt" / "cae.ckpt"),
                       "--data", str(run), "--out", str(out), "--split", "test"])
        assert rc == 0
        with open(out / "reports" / "cae_test_report.csv") as f:
            rows = list(csv.DictReader(f))
        assert all(r["model"] == "cae" for r in rows)
        assert {r["step"] for r in rows} == {"0", "all"}

    def test_error_maps_written(self, pipeline, tmp_path):
        _, _, run = pipeline
        out = tmp_path / "maps"
        rc = cli.main(["evaluate", "--checkpoint", str(run / "ckpt" / "lstm.ckpt"),
                       "--data", str(run), "--out", str(out), "--split", "test", "--error-maps"])
        assert rc == 0
        pgms = list((out / "maps").glob("lstm_*.pgm"))
        assert len(pgms) == 3 * 5  # variables x forecast steps
        assert all(p.with_suffix(".json").is_file() for p in pgms)

    def test_bad_checkpoint_path(self, tmp_path, capsys):
        rc = cli.main(["evaluate", "--checkpoint", str(tmp_path / "x.ckpt"),
                       "--data", str(tmp_path), "--out", str(tmp_path / "o")])
        assert rc == 2


class TestSweep:
    def test_lambda_sweep_rows_and_resume(self, pipeline, tmp_path):
        root, _, run = pipeline
        cfg = write_cfg(tmp_path, {"sweep": {"lambda_grid": [0.1, 0.9],
                                             "epochs": 1, "epochs_cae": 1}})
        out = tmp_path / "sw"
        assert cli.main(["sweep", "--axis", "lambda", "--config", str(cfg),
                         "--data", str(run), "--out", str(out)]) == 0
        with open(out / "reports" / "sweep_lambda.csv") as f:
            lines = list(csv.reader(f))
        assert lines[0] == ["lambda", "mse", "ssim", "psnr"]
        assert [l[0] for l in lines[1:]] == ["0.1", "0.9"]
        before = (out / "reports" / "sweep_lambda.csv").read_bytes()
        assert cli.main(["sweep", "--axis", "lambda", "--config", str(cfg),
                         "--data", str(run), "--out", str(out)]) == 0
        assert (out / "reports" / "sweep_lambda.csv").read_bytes() == before

    def test_default_grids_match_protocol(self):
        cfg = cli.load_config(None)
        assert len(cfg["sweep"]["lambda_grid"]) == 9
        assert cfg["sweep"]["missing_grid"] == [1, 2, 3, 4, 5, 6]
