import csv
import json

import numpy as np
import pytest

from cimtrain import cli, nn


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text(f"steps: 150\nsynth_samples: 240\nhidden_units: 24\noutput_dir: {tmp_path / 'run'}\n")
    return p


def test_train_map_report(tmp_path, cfg_file, capsys):
    assert cli.main(["train", "--config", str(cfg_file)]) == 0
    run = tmp_path / "run"
    man = json.loads((run / "manifest.json").read_text())
    assert man["seed"] == 0 and len(man["config_hash"]) == 64 and man["version"]
    assert (run / "metrics.csv").exists()
    assert cli.main(["map", "--config", str(cfg_file), "--model", str(run)]) == 0
    dep = json.loads((run / "deployment.json").read_text())
    assert dep["reconfigurable"] is True and dep["exactness_check"] == "PASS"
    assert cli.main(["report", "--config", str(cfg_file), "--run", str(run)]) == 0
    rep = json.loads((run / "report.json").read_text())
    assert rep["cost"]["reconfigurable"] is True
    assert "validation accuracy" in (run / "report.txt").read_text()


def test_rerun_bit_identical(tmp_path):
    outs = []
    for k in range(2):
        p = tmp_path / f"c{k}.yaml"
        p.write_text(f"steps: 40\nsynth_samples: 120\nhidden_units: 8\noutput_dir: {tmp_path / str(k)}\n")
        assert cli.main(["train", "--config", str(p)]) == 0
        outs.append(((tmp_path / str(k) / "params.npz").read_bytes(),
                     (tmp_path / str(k) / "metrics.csv").read_text()))
    a, b = [np.load(tmp_path / str(k) / "params.npz") for k in range(2)]
    assert all(np.array_equal(a[key], b[key]) for key in a.files)
    assert outs[0][1] == outs[1][1]


def test_estimate_preset(capsys):
    assert cli.main(["estimate", "--preset", "cifar10-tf8", "--format", "json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["area_mm2"]["total"] == pytest.approx(8.05, rel=0.02)


def test_estimate_counts(tmp_path, capsys):
    p = tmp_path / "counts.yaml"
    p.write_text("bits: 8\ncomponents: {crossbars: 44, dacs: 448, adcs: 896, subtractors: 896}\n")
    assert cli.main(["estimate", "--counts", str(p), "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out)["area_mm2"]["total"] == pytest.approx(8.05, rel=0.02)


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("steps: 10\nlearning_rate: 0.1\n")
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert "learning_rate" in capsys.readouterr().err
    bad.write_text("bits: {weights: 12}\n")
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert cli.main(["train", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["estimate"]) == 2


def test_map_refuses_inexact(tmp_path, cfg_file):
    assert cli.main(["train", "--config", str(cfg_file)]) == 0
    run = tmp_path / "run"
    # corrupt the saved model so that digital and analog paths disagree:
    # an alpha below 1 makes the digital forward use blended weights
    text = (run / "network.yaml").read_text().replace("alpha: 1.0", "alpha: 0.5")
    (run / "network.yaml").write_text(text)
    assert cli.main(["map", "--config", str(cfg_file), "--model", str(run)]) == 3


def test_sweep_csv(tmp_path, capsys):
    p = tmp_path / "s.yaml"
    p.write_text(f"steps: 60\nsynth_samples: 240\nhidden_units: 16\noutput_dir: {tmp_path / 'sw'}\n")
    assert cli.main(["sweep", "--config", str(p), "--fractions", "0,0.25,0.5,0.75,1.0"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "sw" / "sweep.csv")))
    assert len(rows) == 5
    assert {"fraction", "accuracy", "crossbar_area"} <= set(rows[0])
    areas = [float(r["crossbar_area"]) for r in rows]
    assert all(b <= a for a, b in zip(areas, areas[1:]))
    assert cli.main(["sweep", "--config", str(p), "--fractions", "0,2"]) == 2


def test_sweep_parallel_matches_serial(tmp_path):
    cfg = cli.ExperimentConfig.from_dict({"steps": 30, "synth_samples": 120, "hidden_units": 8})
    serial, _ = cli.run_sweep(cfg, [0.0, 1.0], str(tmp_path / "a"), jobs=1)
    par, _ = cli.run_sweep(cfg, [1.0, 0.0], str(tmp_path / "b"), jobs=2)
    assert serial == par
