import json
from pathlib import Path

from pseudograd.cli import main


def _write_tiny_config(path: Path, **extra) -> Path:
    doc = {
        "data": {"kind": "blobs", "n_classes": 3, "n_per_class": 20, "dim": 2,
                 "spread": 0.6, "labeled_per_class": 4, "test_n_per_class": 20},
        "arch": {"hidden_dims": [8], "activation": "relu", "head_bias": False},
        "loss": {"alpha": 0.1, "beta": 0.03, "lambda": 4000.0, "variant": "kl_pred_pseudo"},
        "stage1": {"epochs": 5, "lr": 0.1, "wd": 0.0, "batch": 8},
        "stage2": {"epochs_per_round": 5, "rounds": 2, "lr0": 0.05, "lr_decay_factor": 0.1,
                   "batch": 60, "labeled_fraction_per_batch": 0.25},
        "stage3": {"epochs": 5, "lr": 0.01, "batch": 16},
        "seed": 0,
    }
    doc.update(extra)
    path.write_text(json.dumps(doc))
    return path


class TestExitCodes:
    def test_missing_config_exits_2(self, tmp_path, capsys):
        rc = main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)])
        assert rc == 2
        assert "nope.json" in capsys.readouterr().err

    def test_malformed_config_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        rc = main(["train", "--config", str(bad), "--out", str(tmp_path)])
        assert rc == 2

    def test_verify_missing_artifacts_exits_2(self, tmp_path):
        cfg = _write_tiny_config(tmp_path / "cfg.json")
        rc = main(["verify", "--config", str(cfg), "--out", str(tmp_path / "empty")])
        assert rc == 2


class TestTrainCommand:
    def test_artifacts_and_manifest(self, tmp_path):
        cfg = _write_tiny_config(tmp_path / "cfg.json")
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "ok"
        assert manifest["failure_stage"] is None
        assert manifest["seed"] == 0
        assert (out / "report.csv").exists()

    def test_override_recorded_in_manifest(self, tmp_path):
        cfg = _write_tiny_config(tmp_path / "cfg.json")
        out = tmp_path / "run"
        rc = main(["train", "--config", str(cfg), "--out", str(out),
                   "--override", "loss.alpha=0.2"])
        assert rc == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["loss"]["alpha"] == 0.2

    def test_failure_writes_manifest_with_stage(self, tmp_path):
        cfg = _write_tiny_config(
            tmp_path / "cfg.json",
            data={"kind": "idx", "images": str(tmp_path / "missing.idx"),
                  "labels": str(tmp_path / "missing2.idx"), "holdout": 5,
                  "labeled_per_class": 1},
        )
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 1
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "failed"
        assert manifest["failure_stage"] == "data"

    def test_report_bytes_identical_across_runs(self, tmp_path):
        cfg = _write_tiny_config(tmp_path / "cfg.json")
        main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")])
        main(["train", "--config", str(cfg), "--out", str(tmp_path / "b")])
        assert (tmp_path / "a/report.csv").read_bytes() == (tmp_path / "b/report.csv").read_bytes()


class TestGenData:
    def test_writes_train_and_test_csv(self, tmp_path):
        cfg = _write_tiny_config(tmp_path / "cfg.json")
        out = tmp_path / "data"
        assert main(["gen-data", "--config", str(cfg), "--out", str(out)]) == 0
        train = (out / "train.csv").read_text().strip().splitlines()
        assert train[0] == "x0,x1,label"
        assert len(train) == 61
        assert (out / "test.csv").exists()


class TestGradcheckCommand:
    def test_passes_and_writes_json(self, tmp_path):
        cfg = _write_tiny_config(tmp_path / "cfg.json")
        out = tmp_path / "gc"
        rc = main(["gradcheck", "--config", str(cfg), "--out", str(out), "--trials", "5"])
        assert rc == 0
        doc = json.loads((out / "gradcheck.json").read_text())
        assert doc["pass"] is True


class TestExportFeatures:
    def test_requires_two_d_feature(self, tmp_path, capsys):
        cfg = _write_tiny_config(tmp_path / "cfg.json")  # hidden (8,): not 2-D
        rc = main(["export-features", "--config", str(cfg), "--out", str(tmp_path / "x")])
        assert rc == 2
        assert "2-D" in capsys.readouterr().err

    def test_writes_before_after_csvs(self, tmp_path):
        cfg = _write_tiny_config(
            tmp_path / "cfg.json",
            arch={"hidden_dims": [8, 2], "activation": "tanh", "head_bias": False},
        )
        out = tmp_path / "feat"
        assert main(["export-features", "--config", str(cfg), "--out", str(out)]) == 0
        for name in ("features_before.csv", "features_after.csv"):
            lines = (out / name).read_text().strip().splitlines()
            assert lines[0] == "x,y,label,is_labeled"
            assert len(lines) == 61
        summary = json.loads((out / "export_summary.json").read_text())
        assert set(summary["compaction_ratio"]) == {"labeled", "unlabeled"}


class TestAblateCommand:
    def test_lc_grid_csv(self, tmp_path):
        cfg = _write_tiny_config(tmp_path / "cfg.json")
        out = tmp_path / "ab"
        rc = main(["ablate", "--config", str(cfg), "--out", str(out),
                   "--seeds", "2", "--grid", "lc"])
        assert rc == 0
        lines = (out / "ablation.csv").read_text().strip().splitlines()
        assert len(lines) == 4  # header + three loss variants
        assert lines[0].startswith("grid,cell,n_seeds,median_test_error")

    def test_alpha_grid_completes_all_cells(self, tmp_path):
        # no ordering asserted for the alpha sweep, completeness only
        cfg = _write_tiny_config(tmp_path / "cfg.json")
        out = tmp_path / "ab"
        rc = main(["ablate", "--config", str(cfg), "--out", str(out),
                   "--seeds", "1", "--grid", "alpha"])
        assert rc == 0
        lines = (out / "ablation.csv").read_text().strip().splitlines()
        assert len(lines) == 6  # header + alpha in {0.1 .. 0.5}
        assert all("alpha=" in line for line in lines[1:])

    def test_strategy_grid_has_all_five_cells(self, tmp_path):
        cfg = _write_tiny_config(tmp_path / "cfg.json")
        out = tmp_path / "ab"
        rc = main(["ablate", "--config", str(cfg), "--out", str(out),
                   "--seeds", "1", "--grid", "strategy"])
        assert rc == 0
        lines = (out / "ablation.csv").read_text().strip().splitlines()
        cells = {line.split(",")[1] for line in lines[1:]}
        assert cells == {"single_round", "repeat", "repeat_repredict",
                         "repeat_decay", "full_schedule"}
