import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from destpred.cli import main
from destpred.metrics import MetricsReport

GEN_SMALL = ["--n-train", "8", "--n-val", "4", "--n-test", "6"]


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_ok(argv):
    rc = main(argv)
    assert rc == 0, f"{argv} exited {rc}"


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    run_ok(["gen-data", "--out", str(out), "--seed", "7", *GEN_SMALL])
    return out


@pytest.fixture(scope="module")
def single_point_ckpt(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("sp")
    run_ok(
        ["train", "--data", str(dataset), "--model", "single-point", "--out", str(out),
         "--epochs", "2", "--batch-size", "4"]
    )
    return out / "single-point.ckpt"


@pytest.fixture(scope="module")
def unimodal_ckpt(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("uni")
    run_ok(
        ["train", "--data", str(dataset), "--model", "unimodal", "--out", str(out),
         "--epochs", "2", "--batch-size", "4"]
    )
    return out / "unimodal.ckpt"


class TestGenData:
    def test_writes_expected_files(self, dataset):
        for name in (
            "train.jsonl", "val.jsonl", "test.jsonl",
            "train_truth.jsonl", "val_truth.jsonl", "test_truth.jsonl",
            "train_features.npz", "manifest.json",
        ):
            assert (dataset / name).exists(), name

    def test_same_seed_is_bit_identical(self, dataset, tmp_path):
        again = tmp_path / "again"
        run_ok(["gen-data", "--out", str(again), "--seed", "7", *GEN_SMALL])
        for name in ("train.jsonl", "val.jsonl", "test.jsonl", "test_truth.jsonl", "train_features.npz"):
            assert sha256(again / name) == sha256(dataset / name), name

    def test_different_seed_differs(self, dataset, tmp_path):
        other = tmp_path / "other"
        run_ok(["gen-data", "--out", str(other), "--seed", "8", *GEN_SMALL])
        assert sha256(other / "train.jsonl") != sha256(dataset / "train.jsonl")

    def test_manifest_has_versions_and_no_timestamps(self, dataset):
        manifest = json.loads((dataset / "manifest.json").read_text())
        assert manifest["subcommand"] == "gen-data"
        assert set(manifest["versions"]) == {"package", "python", "numpy", "torch"}
        assert manifest["options"]["seed"] == 7
        flat = json.dumps(manifest).lower()
        assert "time" not in flat and "date" not in flat


class TestRasterize:
    def test_dumps_channel_pngs(self, dataset, tmp_path):
        out = tmp_path / "rast"
        run_ok(["rasterize", "--data", str(dataset), "--split", "train",
                "--dims", "96x144", "--out", str(out)])
        pngs = sorted(out.glob("*.png"))
        assert len(pngs) == 16  # composite plus one per channel

    def test_unknown_record_id(self, dataset, tmp_path, capsys):
        rc = main(["rasterize", "--data", str(dataset), "--record-id", "nope",
                   "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestTrain:
    def test_writes_checkpoint_curve_manifest(self, single_point_ckpt):
        out = single_point_ckpt.parent
        assert single_point_ckpt.exists()
        curve = (out / "curve.csv").read_text().strip().splitlines()
        assert curve[0] == "epoch,train_loss,val_loss"
        assert len(curve) == 3
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["options"]["model"] == "single-point"

    def test_grounding_training_runs(self, dataset, tmp_path):
        out = tmp_path / "gr"
        run_ok(["train", "--data", str(dataset), "--model", "grounding", "--out", str(out),
                "--epochs", "2", "--batch-size", "4"])
        assert (out / "grounding.ckpt").exists()
        head = (out / "curve.csv").read_text().splitlines()[0]
        assert head == "epoch,train_loss,val_iou50"

    def test_unknown_model_rejected_by_argparse(self, dataset, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--data", str(dataset), "--model", "transformer", "--out", str(tmp_path)])
        assert exc.value.code == 2


class TestEval:
    def test_pick_ego_report(self, dataset, tmp_path):
        out = tmp_path / "ev"
        run_ok(["eval", "--data", str(dataset), "--method", "pick-ego",
                "--samples", "8", "--bootstrap", "20", "--out", str(out)])
        report = MetricsReport.load(out / "report.json")
        assert len(report.rows) == 1
        m = report.rows[0]
        m.validate()
        assert m.method == "pick-ego"
        assert m.n_records == 6
        assert (out / "report.csv").read_text().startswith("method,")

    def test_eval_is_deterministic(self, dataset, tmp_path):
        outs = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            run_ok(["eval", "--data", str(dataset), "--method", "random-point",
                    "--samples", "50", "--bootstrap", "10", "--seed", "3", "--out", str(out)])
            outs.append(sha256(out / "report.json"))
        assert outs[0] == outs[1]

    def test_trained_single_point_eval(self, dataset, single_point_ckpt, tmp_path):
        out = tmp_path / "sp"
        run_ok(["eval", "--data", str(dataset), "--method", "single-point",
                "--checkpoint", str(single_point_ckpt), "--samples", "4",
                "--bootstrap", "0", "--out", str(out)])
        m = MetricsReport.load(out / "report.json").rows[0]
        assert m.ade >= 0

    def test_truth_oracle_eval(self, dataset, tmp_path):
        out = tmp_path / "or"
        run_ok(["eval", "--data", str(dataset), "--method", "truth-oracle",
                "--samples", "40", "--bootstrap", "0", "--out", str(out)])
        m = MetricsReport.load(out / "report.json").rows[0]
        assert m.ade < 10.0  # the generator's own draws stay near its modes

    def test_checkpoint_kind_mismatch(self, dataset, single_point_ckpt, tmp_path, capsys):
        rc = main(["eval", "--data", str(dataset), "--method", "mdn",
                   "--checkpoint", str(single_point_ckpt), "--out", str(tmp_path / "x")])
        assert rc == 1
        err = capsys.readouterr().err
        assert "single-point" in err and "mdn" in err

    def test_method_needs_checkpoint(self, dataset, tmp_path, capsys):
        rc = main(["eval", "--data", str(dataset), "--method", "unimodal",
                   "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "needs --checkpoint" in capsys.readouterr().err

    def test_missing_data_dir(self, tmp_path, capsys):
        rc = main(["eval", "--data", str(tmp_path / "nowhere"), "--method", "pick-ego",
                   "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_env_var_supplies_data_dir(self, dataset, tmp_path, monkeypatch):
        monkeypatch.setenv("DESTPRED_DATA", str(dataset))
        out = tmp_path / "env"
        run_ok(["eval", "--method", "pick-ego", "--samples", "4",
                "--bootstrap", "0", "--out", str(out)])
        assert (out / "report.json").exists()

    def test_no_data_anywhere(self, tmp_path, monkeypatch, capsys):
        monkeypatch.delenv("DESTPRED_DATA", raising=False)
        rc = main(["eval", "--method", "pick-ego", "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "DESTPRED_DATA" in capsys.readouterr().err


class TestPredict:
    def test_heatmap_and_components(self, dataset, unimodal_ckpt, tmp_path):
        out = tmp_path / "pred"
        rid = "test-00000"
        run_ok(["predict", "--data", str(dataset), "--record-id", rid,
                "--checkpoint", str(unimodal_ckpt), "--heatmap-dims", "96x144",
                "--out", str(out)])
        assert (out / f"{rid}_heatmap.png").exists()
        blob = json.loads((out / f"{rid}_components.json").read_text())
        assert blob["record"] == rid
        weights = [c["weight"] for c in blob["components"]]
        assert weights == sorted(weights, reverse=True)
        assert sum(weights) == pytest.approx(1.0)

    def test_point_model_rejected(self, dataset, single_point_ckpt, tmp_path, capsys):
        rc = main(["predict", "--data", str(dataset), "--record-id", "test-00000",
                   "--checkpoint", str(single_point_ckpt), "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "mixture model" in capsys.readouterr().err


class TestReport:
    def test_merges_reports(self, dataset, tmp_path):
        reports = []
        for i, method in enumerate(("pick-ego", "pick-referred")):
            out = tmp_path / f"r{i}"
            run_ok(["eval", "--data", str(dataset), "--method", method,
                    "--samples", "4", "--bootstrap", "0", "--out", str(out)])
            reports.append(str(out / "report.json"))
        merged = tmp_path / "merged"
        run_ok(["report", "--inputs", *reports, "--out", str(merged)])
        lines = (merged / "combined.csv").read_text().strip().splitlines()
        assert len(lines) == 3
        assert {r.split(",")[0] for r in lines[1:]} == {"pick-ego", "pick-referred"}
        combined = json.loads((merged / "combined.json").read_text())
        assert len(combined["rows"]) == 2
        per_intent = (merged / "per_intent.csv").read_text().splitlines()
        assert per_intent[0] == "intent,pick-ego_ade,pick-ego_pa4,pick-referred_ade,pick-referred_pa4"
        assert len(per_intent) == 19  # header + 18 intents

    def test_empty_inputs_error(self, tmp_path, capsys):
        empty = tmp_path / "empty.json"
        empty.write_text('{"rows": []}')
        rc = main(["report", "--inputs", str(empty), "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "no metric rows" in capsys.readouterr().err


class TestAuditGrad:
    def test_small_audit_passes(self, tmp_path):
        out = tmp_path / "audit"
        run_ok(["audit-grad", "--mixture-instances", "4", "--model-instances", "1",
                "--coords", "6", "--out", str(out)])
        blob = json.loads((out / "audit.json").read_text())
        assert blob["mixture_core"]["max_rel_err"] < blob["mixture_core"]["tolerance"]
        assert blob["model"]["max_rel_err"] < blob["model"]["tolerance"]


class TestConfigFile:
    def test_config_supplies_defaults(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"seed": 9, "n-train": 5, "n_val": 2, "n-test": 3}))
        a = tmp_path / "a"
        run_ok(["--config", str(cfg), "gen-data", "--out", str(a)])
        b = tmp_path / "b"
        run_ok(["gen-data", "--out", str(b), "--seed", "9", "--n-train", "5",
                "--n-val", "2", "--n-test", "3"])
        assert sha256(a / "train.jsonl") == sha256(b / "train.jsonl")

    def test_explicit_flag_beats_config(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"seed": 9, "n-train": 5, "n_val": 2, "n-test": 3}))
        a = tmp_path / "a"
        run_ok(["--config", str(cfg), "gen-data", "--out", str(a), "--seed", "4"])
        manifest = json.loads((a / "manifest.json").read_text())
        assert manifest["options"]["seed"] == 4

    def test_bad_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("[1, 2]")
        rc = main(["--config", str(cfg), "gen-data", "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "config" in capsys.readouterr().err


class TestUsageErrors:
    def test_no_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_missing_required_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data"])
        assert exc.value.code == 2

    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_bad_dims_is_runtime_error(self, dataset, tmp_path, capsys):
        rc = main(["rasterize", "--data", str(dataset), "--dims", "banana",
                   "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "expected HxW" in capsys.readouterr().err
