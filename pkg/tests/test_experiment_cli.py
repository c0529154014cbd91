from __future__ import annotations

import json
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from remasker.cli import main, sidecar_paths
from remasker.data import load_csv, normalize, synthetic_dataset
from remasker.experiment import (
    ExperimentConfig, ExperimentError, load_config, report_schema, run_experiment,
)
from remasker.imputer import RemaskerConfig
from remasker.missingness import MissingnessSpec, simulate

TINY = ["--epochs", "2", "--width", "8", "--enc-depth", "1", "--dec-depth", "1", "--heads", "2"]
TINY_CONFIG = RemaskerConfig(max_epochs=2, width=8, encoder_depth=1, decoder_depth=1, heads=2)
REPO = Path(__file__).resolve().parents[1]


def _complete_csv(path: Path, n=80) -> Path:
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, 3))
    cats = np.array(["lo", "hi"])[(x[:, 0] > 0).astype(int)]
    lines = ["a,b,c,kind"] + [f"{r[0]:.6f},{r[1]:.6f},{r[0] + r[2]:.6f},{k}" for r, k in zip(x, cats)]
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# run_experiment
# ---------------------------------------------------------------------------

def test_mean_method_matches_oracle():
    cfg = ExperimentConfig(dataset="synthetic:300", method="mean", seed=4)
    report = run_experiment(cfg)
    truth = normalize(synthetic_dataset(300)).values
    mask = simulate(truth, MissingnessSpec("MCAR", 0.3, seed=4))
    miss = mask == 0
    col_mean = np.array([truth[mask[:, j] == 1, j].mean() for j in range(truth.shape[1])])
    filled = np.where(miss, col_mean, truth)
    oracle = float(np.sqrt(np.mean((filled[miss] - truth[miss]) ** 2)))
    assert report["runs"][0]["rmse"] == pytest.approx(oracle, rel=1e-12)


def test_report_metadata_and_schema():
    report = run_experiment(ExperimentConfig(dataset="synthetic:200", method="median", repetitions=2))
    jsonschema.validate(report, report_schema())
    assert report["mechanism"] == "MCAR" and report["ratio"] == 0.3
    assert [r["seed"] for r in report["runs"]] == [0, 1]
    rm = [r["rmse"] for r in report["runs"]]
    assert report["summary"]["rmse"]["mean"] == pytest.approx(np.mean(rm))
    assert report["summary"]["rmse"]["std"] == pytest.approx(np.std(rm))


def test_remasker_report_validates(tmp_path):
    cfg = ExperimentConfig(dataset="synthetic:100", remasker=TINY_CONFIG, output=str(tmp_path / "r.json"),
                           training_log=str(tmp_path / "log.json"), checkpoint=str(tmp_path / "m.npz"))
    report = run_experiment(cfg)
    jsonschema.validate(json.loads((tmp_path / "r.json").read_text()), report_schema())
    assert report["config"]["remasker"]["max_epochs"] == 2
    assert (tmp_path / "log.json").exists() and (tmp_path / "m.npz").exists()


def test_repetitions_byte_identical(tmp_path):
    out = tmp_path / "r.json"
    cfg = ExperimentConfig(dataset="synthetic:120", remasker=TINY_CONFIG, repetitions=3, seed=5,
                           output=str(out))
    run_experiment(cfg)
    first = out.read_bytes()
    run_experiment(cfg)
    assert out.read_bytes() == first


def test_incomplete_benchmark_data_fails_with_stage(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("a,b\n1,2\n3,\n")
    with pytest.raises(ExperimentError, match=r"^\[load\]"):
        run_experiment(ExperimentConfig(dataset=str(p), method="mean", output=str(tmp_path / "r.json")))
    assert not (tmp_path / "r.json").exists()


def test_partial_outputs_removed_on_failure(tmp_path):
    log = tmp_path / "log.json"
    # the second repetition's checkpoint directory does not exist, so persistence fails after rep 0
    cfg = ExperimentConfig(dataset="synthetic:60", remasker=TINY_CONFIG, repetitions=2,
                           training_log=str(log), checkpoint=str(tmp_path / "missing" / "m.npz"))
    with pytest.raises(ExperimentError, match=r"^\[persist\]"):
        run_experiment(cfg)
    assert list(tmp_path.iterdir()) == []


def test_default_config_file_matches_defaults():
    assert load_config(REPO / "configs" / "default.yaml") == ExperimentConfig()


def test_config_rejects_unknown_keys(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("dataset: synthetic\nepochs: 3\n")
    with pytest.raises(ExperimentError, match="config"):
        load_config(p)
    p.write_text("remasker:\n  depth: 3\n")
    with pytest.raises(ExperimentError, match="config"):
        load_config(p)


def test_config_round_trip():
    cfg = ExperimentConfig(dataset="x.csv", label_col="y", method="frequent", repetitions=4,
                           missingness=MissingnessSpec("MNAR", 0.2, 0.4))
    assert ExperimentConfig.from_dict(cfg.to_dict()) == replace(cfg)


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def test_simulate_deterministic(tmp_path, capsys):
    src = _complete_csv(tmp_path / "full.csv")
    for name in ("one", "two"):
        assert main(["simulate", "--input", str(src), "--output", str(tmp_path / f"{name}.csv"),
                     "--mechanism", "mcar", "--ratio", "0.3", "--seed", "7"]) == 0
    m1, t1 = sidecar_paths(tmp_path / "one.csv")
    m2, _ = sidecar_paths(tmp_path / "two.csv")
    assert m1.read_bytes() == m2.read_bytes()
    assert t1.read_text() == src.read_text()
    holed = load_csv(tmp_path / "one.csv")
    assert 0.15 < (holed.mask == 0).mean() < 0.45


def test_simulate_mar_observable_columns(tmp_path):
    src = _complete_csv(tmp_path / "full.csv", n=200)
    assert main(["simulate", "--input", str(src), "--output", str(tmp_path / "h.csv"),
                 "--mechanism", "mar", "--ratio", "0.3"]) == 0
    mask = np.loadtxt(sidecar_paths(tmp_path / "h.csv")[0], delimiter=",", skiprows=1)
    assert (mask.min(axis=0) == 1).sum() >= 1


def test_impute_no_missing_cells_is_identity(tmp_path):
    src = _complete_csv(tmp_path / "full.csv")
    out = tmp_path / "out.csv"
    assert main(["impute", "--input", str(src), "--output", str(out)] + TINY) == 0
    assert out.read_text() == src.read_text()


@pytest.mark.parametrize("method", ["remasker", "mean"])
def test_impute_preserves_observed_and_fills(tmp_path, method):
    src = _complete_csv(tmp_path / "full.csv")
    holed = tmp_path / "h.csv"
    main(["simulate", "--input", str(src), "--output", str(holed), "--ratio", "0.3", "--seed", "1"])
    out = tmp_path / "out.csv"
    assert main(["impute", "--input", str(holed), "--output", str(out), "--method", method] + TINY) == 0
    before = [line.split(",") for line in holed.read_text().splitlines()]
    after = [line.split(",") for line in out.read_text().splitlines()]
    assert before[0] == after[0]
    for row_in, row_out in zip(before[1:], after[1:]):
        for a, b in zip(row_in, row_out):
            if a:
                assert a == b
            else:
                assert b != ""
    kinds = {r[3] for r in after[1:]}
    assert kinds <= {"lo", "hi"}


def test_external_bench_scores_simulate_output(tmp_path):
    src = _complete_csv(tmp_path / "full.csv")
    holed = tmp_path / "h.csv"
    main(["simulate", "--input", str(src), "--output", str(holed), "--seed", "2"])
    out = tmp_path / "out.csv"
    main(["impute", "--input", str(holed), "--output", str(out), "--method", "mean"])
    mask, truth = sidecar_paths(holed)
    report = tmp_path / "r.json"
    assert main(["bench", "--imputed", str(out), "--truth", str(truth), "--mask", str(mask),
                 "--output", str(report)]) == 0
    data = json.loads(report.read_text())
    jsonschema.validate(data, report_schema())
    assert data["runs"][0]["rmse"] > 0
    # scoring the truth against itself is perfect
    assert main(["bench", "--imputed", str(truth), "--truth", str(truth), "--mask", str(mask),
                 "--output", str(report)]) == 0
    assert json.loads(report.read_text())["runs"][0]["rmse"] == 0.0


def test_bench_echoes_defaults(capsys):
    assert main(["bench", "--input", "synthetic:80", "--method", "mean"]) == 0
    report = json.loads(capsys.readouterr().out)
    model = report["config"]["remasker"]
    assert (model["max_epochs"], model["width"], model["masking_ratio"]) == (600, 64, 0.5)
    assert report["mechanism"] == "MCAR" and report["ratio"] == 0.3


def test_bench_flags_override_config(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("dataset: synthetic:80\nmethod: median\nremasker:\n  width: 32\n  heads: 4\n")
    assert main(["bench", "--config", str(cfg), "--width", "16", "--ratio", "0.2"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["method"] == "median" and report["ratio"] == 0.2
    assert report["config"]["remasker"]["width"] == 16


def test_bench_byte_identical(tmp_path):
    out = tmp_path / "r.json"
    runs = []
    for _ in range(2):
        assert main(["bench", "--input", "synthetic:80", "--output", str(out), "--repetitions", "2"] + TINY) == 0
        runs.append(out.read_bytes())
    assert runs[0] == runs[1]


def test_inspect_log(tmp_path, capsys):
    log = tmp_path / "log.json"
    main(["bench", "--input", "synthetic:60", "--log", str(log), "--output", str(tmp_path / "r.json")] + TINY)
    capsys.readouterr()
    assert main(["inspect-log", "--input", str(log)]) == 0
    out = capsys.readouterr().out
    assert "epochs      2" in out and "loss first" in out


def test_exit_codes(tmp_path, capsys):
    with pytest.raises(SystemExit) as err:
        main(["impute", "--input", "x.csv"])
    assert err.value.code == 2
    with pytest.raises(SystemExit) as err:
        main(["bench", "--bogus"])
    assert err.value.code == 2
    with pytest.raises(SystemExit) as err:
        main(["bench", "--imputed", "a.csv"])
    assert err.value.code == 2
    assert main(["impute", "--input", str(tmp_path / "nope.csv"), "--output", str(tmp_path / "o.csv")]) == 1
    assert "remasker: error:" in capsys.readouterr().err
    assert not (tmp_path / "o.csv").exists()
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert main(["inspect-log", "--input", str(bad)]) == 1


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "remasker", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "simulate" in proc.stdout
