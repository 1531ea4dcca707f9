import csv
import json
from pathlib import Path

import pytest

from dqm import synthetic
from dqm.cli import main

ROOT = Path(__file__).resolve().parents[1]
DEMO = str(ROOT / "configs" / "demo.yaml")


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def sweep_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    code = main(["sweep", "--config", DEMO, "--synthetic", "12000", "--devices", "50-400",
                 "--out", str(out), "--train-first"])
    assert code == 0
    return out


def test_train_file_contract(tmp_path, capsys):
    code, out, _ = _run(capsys, "train", "--config", DEMO, "--synthetic", "3000",
                        "--models", "lda,lr,svm,mlp", "--out", str(tmp_path))
    assert code == 0
    reports = sorted(p.name for p in (tmp_path / "train").glob("*.json"))
    assert reports == ["lda.json", "lr.json", "mlp.json", "svm.json"]
    rows = list(csv.DictReader((tmp_path / "train" / "training.csv").open()))
    assert [r["kind"] for r in rows] == ["lda", "lr", "svm", "mlp"]
    lda = json.loads((tmp_path / "train" / "lda.json").read_text())
    assert set(lda) == {"kind", "train_time_s", "train_accuracy", "confusion"}
    assert lda["train_accuracy"] > 0.9


def test_simulate_replay_is_byte_identical(tmp_path, capsys):
    traces = []
    for i in range(2):
        out = tmp_path / f"r{i}"
        code, stdout, _ = _run(capsys, "simulate", "--config", DEMO, "--seed", "7", "--out", str(out),
                               "--train-first")
        assert code == 0
        assert json.loads(stdout)["devices_quarantined"] <= 50
        traces.append((out / "simulate" / "trace.ndjson").read_bytes())
        assert (out / "simulate" / "episodes.ndjson").exists()
    assert traces[0] == traces[1]


def test_simulate_needs_model(tmp_path, capsys):
    code, _, err = _run(capsys, "simulate", "--config", DEMO, "--out", str(tmp_path))
    assert code == 1 and "--train-first" in err


def test_simulate_rejects_dimension_mismatch(tmp_path, capsys):
    assert main(["train", "--config", DEMO, "--synthetic", "2000", "--models", "lda", "--out", str(tmp_path)]) == 0
    schema = json.loads((tmp_path / "schema.json").read_text())
    schema["categorical_maps"]["service"]["zz_new"] = 999
    (tmp_path / "schema.json").write_text(json.dumps(schema))
    code, _, err = _run(capsys, "simulate", "--config", DEMO, "--models", "lda", "--out", str(tmp_path))
    assert code == 1 and "feature_dim" in err


def test_sweep_rows_and_summary(sweep_dir):
    rows = list(csv.DictReader((sweep_dir / "sweep" / "sweep.csv").open()))
    assert len(rows) == 16
    assert {r["model"] for r in rows} == {"lda", "lr"}
    assert sorted({int(r["n_devices"]) for r in rows}) == list(range(50, 401, 50))
    summary = json.loads((sweep_dir / "sweep" / "summary.json").read_text())
    assert set(summary["lda"]) >= {"mean_quarantine_accuracy", "spread_quarantine_accuracy"}


def test_sweep_rerun_is_byte_identical(sweep_dir, tmp_path):
    out = tmp_path / "again"
    assert main(["sweep", "--config", DEMO, "--synthetic", "12000", "--devices", "50-400",
                 "--out", str(out), "--train-first"]) == 0
    assert (out / "sweep" / "sweep.csv").read_bytes() == (sweep_dir / "sweep" / "sweep.csv").read_bytes()


def test_sweep_names_failing_point(tmp_path, capsys):
    code, _, err = _run(capsys, "sweep", "--config", DEMO, "--synthetic", "1500", "--devices", "50,400",
                        "--out", str(tmp_path), "--train-first")
    assert code == 1 and "n_devices=400" in err


def test_report_passes_then_catches_tampering(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["train", "--config", DEMO, "--out", str(out)]) == 0
    assert main(["simulate", "--config", DEMO, "--out", str(out)]) == 0
    assert main(["sweep", "--config", DEMO, "--out", str(out)]) == 0
    capsys.readouterr()
    code, stdout, _ = _run(capsys, "report", "--out", str(out))
    assert code == 0
    assert "FAIL" not in stdout and stdout.count("PASS") >= 5
    for name in ("Training time", "Training accuracy", "Devices quarantined", "Packets quarantined",
                 "Quarantine accuracy"):
        assert name in stdout
    assert (out / "report" / "quarantine_accuracy.csv").exists()

    rpath = out / "simulate" / "report.json"
    doc = json.loads(rpath.read_text())
    doc["quarantine_accuracy"] = 0.99
    rpath.write_text(json.dumps(doc))
    code, stdout, _ = _run(capsys, "report", "--out", str(out))
    assert code == 2
    assert "FAIL simulate accuracy identity" in stdout


def test_report_missing_inputs(tmp_path, capsys):
    code, _, err = _run(capsys, "report", "--out", str(tmp_path))
    assert code == 1 and "training.csv" in err


def test_usage_and_config_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    assert main(["train", "--config", str(tmp_path / "nope.yaml")]) == 1
    (tmp_path / "noseed.yaml").write_text("data: {synthetic: {n: 100}}\n")
    assert main(["train", "--config", str(tmp_path / "noseed.yaml")]) == 1
    assert main(["train", "--config", DEMO, "--models", "knn", "--out", str(tmp_path)]) == 1
    assert main(["train", "--config", DEMO, "--train-file", str(tmp_path / "missing.txt")]) == 1


def test_bad_dataset_line_is_named(tmp_path, capsys):
    p = synthetic.write_nslkdd(tmp_path / "d.txt", 20, seed=0)
    lines = p.read_text().splitlines()
    lines[4] = ",".join(lines[4].split(",")[:40])
    p.write_text("\n".join(lines) + "\n")
    code, _, err = _run(capsys, "train", "--seed", "1", "--train-file", str(p), "--out", str(tmp_path / "o"))
    assert code == 1 and ":5:" in err


def test_dataset_inspect(tmp_path, capsys):
    p = synthetic.write_nslkdd(tmp_path / "d.txt", 300, seed=0)
    code, out, _ = _run(capsys, "dataset", "inspect", str(p))
    info = json.loads(out)
    assert code == 0 and info["records"] == 300
    assert set(info["cardinalities"]) == {"protocol_type", "service", "flag"}
    assert info["attack_records"] + info["normal_records"] == 300
