import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from fedsoda import ftns
from fedsoda.cli import main

SMALL = {"num_clients": 2, "image_size": 20, "rounds": 1, "local_epochs": 1}


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 0, "method": "fedavg", **SMALL}))
    return str(path)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_print_config_echoes_defaults(small_cfg, capsys):
    assert main(["run", "--config", small_cfg, "--print-config", "--seed", "5"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["seed"] == 5 and cfg["lambda"] == 0.4 and cfg["gamma"] == 0.25


def test_run_requires_seed_and_method(tmp_path, capsys):
    empty = tmp_path / "empty.json"
    empty.write_text("")
    assert main(["run", "--config", str(empty)]) == 2
    err = capsys.readouterr().err
    assert "seed" in err and "method" in err


def test_range_error_exit_code(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 0, "method": "fedsoda", "lambda": 1.5}))
    assert main(["run", "--config", str(path)]) != 0
    assert "lambda" in capsys.readouterr().err


def test_run_writes_csvs(small_cfg, tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", small_cfg, "--out", str(out)]) == 0
    rows = read_csv(out / "rounds.csv")
    assert list(rows[0]) == ["round", "client_id", "method", "dice", "accuracy", "loss_ce", "loss_sc"]
    assert len(rows) == 4
    assert [r["method"] for r in read_csv(out / "summary.csv")] == ["fedavg"]


def test_compare_four_methods(small_cfg, tmp_path):
    out = tmp_path / "cmp"
    assert main(["compare", "--config", small_cfg, "--out", str(out)]) == 0
    assert [r["method"] for r in read_csv(out / "summary.csv")] == ["fedavg", "fedprox", "fedbn", "fedsoda"]


def test_compare_rejects_bad_methods(small_cfg, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["compare", "--config", small_cfg, "--methods", "fedavg,fedsgd"])
    assert exc.value.code != 0


def test_ablate_five_rows(small_cfg, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", small_cfg, "--out", str(out)]) == 0
    assert [r["method"] for r in read_csv(out / "summary.csv")] == ["none", "SO", "DA", "SO+DA", "SO+DA+Lsc"]


def test_sweep_values(small_cfg, tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", "--config", small_cfg, "--param", "lambda", "--values", "0,1", "--out", str(out)]) == 0
    assert len(read_csv(out / "summary.csv")) == 2


def test_gen_data(small_cfg, tmp_path):
    out = tmp_path / "data"
    assert main(["gen-data", "--config", small_cfg, "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert [c["client_id"] for c in manifest["clients"]] == [0, 1]
    entry = manifest["clients"][1]
    images = ftns.read_ftns(out / entry["files"]["train_images"])
    masks = ftns.read_ftns(out / entry["files"]["train_masks"])
    assert images.shape == (entry["n_train"], 1, 20, 20) == masks.shape
    assert entry["stats"]["mean"][0] == pytest.approx(float(np.mean(images.astype(np.float64))))


def test_grad_check_passes(capsys):
    assert main(["grad-check", "--coords", "20"]) == 0
    out = capsys.readouterr().out
    assert "conv: PASS" in out and "norm: PASS" in out


def test_grad_check_impossible_tolerance_fails(capsys):
    assert main(["grad-check", "--coords", "5", "--tol", "0"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_io_failure_exit_code(small_cfg, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-data", "--config", small_cfg, "--out", str(blocker / "sub")]) == 1


def test_module_entry_point(small_cfg):
    env = dict(os.environ, FEDSODA_LOG="debug")
    proc = subprocess.run([sys.executable, "-m", "fedsoda", "run", "--config", small_cfg, "--print-config"],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["method"] == "fedavg"
