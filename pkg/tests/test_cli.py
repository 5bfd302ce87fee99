import csv
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from pdalign.cli import (REPORT_KEYS, UsageError, atomic_write, emit_reports, parse_config_text,
                         resolve_config, run)
from pdalign.data import SynthConfig
from pdalign.trainer import EpochReport, TrainConfig

FAST = ["--epochs", "2", "--enc-hidden", "8", "--d-z", "4", "--cls-hidden", "4",
        "--record-timing", "false"]


@pytest.fixture(scope="module")
def data_file(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run(["gen-data", "--out", str(out), "--per-class", "10", "--dim", "6", "--seed", "2"]) == 0
    return out / "data.txt"


def report(epoch=1, acc=0.5):
    return EpochReport(epoch=epoch, l_ce=1 / 3, l_comp=-0.1, l_inter=2.0, l_intra=0.25,
                       l_ent=np.log(6), total=0.1 + 1e-17, n_tau=3, tau=[0.1, 2 / 3, 1.0],
                       accuracy=acc, wall_ms=0.0)


# -- config parsing ------------------------------------------------------------

def test_parse_flat_config():
    text = "# comment\nlr = 0.001\nepochs: 3\nsource_only = true  # trailing\n\n"
    assert parse_config_text(text, TrainConfig) == {"lr": 1e-3, "epochs": 3, "source_only": True}


@pytest.mark.parametrize("text, needle", [
    ("lr = 1\nbogus = 3\n", "line 2: unknown config key 'bogus'"),
    ("lr = 1\nlr = 2\n", "duplicate"),
    ("epochs = three\n", "epochs"),
    ("just words\n", "line 1"),
])
def test_bad_config_text(text, needle):
    with pytest.raises(UsageError, match=needle):
        parse_config_text(text, TrainConfig)


def test_precedence_cli_over_file_over_preset():
    cfg = resolve_config(TrainConfig, [{"lr": 1.0, "epochs": 5}, {"lr": 2.0}, {"epochs": 7}])
    assert (cfg.lr, cfg.epochs, cfg.gamma) == (2.0, 7, 0.7)


def test_invalid_value_is_a_usage_error():
    with pytest.raises(UsageError):
        resolve_config(TrainConfig, [{"epochs": 0}])


# -- report emission ---------------------------------------------------------------

def test_json_round_trip_is_exact(tmp_path):
    reps = [report(1), report(2, acc=None)]
    path = emit_reports(reps, "json", tmp_path / "r.json")
    back = json.loads(path.read_text())
    assert len(back) == 2
    assert list(back[0]) == list(REPORT_KEYS)
    assert back[0]["l_ce"] == 1 / 3 and back[0]["tau"][1] == 2 / 3
    assert back[0]["l_ent"] == float(np.log(6))
    assert back[1]["accuracy"] is None


def test_csv_columns_and_round_trip(tmp_path):
    path = emit_reports([report()], "csv", tmp_path / "r.csv")
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == 1
    assert list(rows[0]) == ["epoch", "l_ce", "l_comp", "l_inter", "l_intra", "l_ent", "total",
                             "n_tau", "accuracy", "tau_0", "tau_1", "tau_2", "wall_ms"]
    assert float(rows[0]["l_ce"]) == 1 / 3
    assert float(rows[0]["tau_1"]) == 2 / 3


def test_emit_rejects_empty_and_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        emit_reports([], "json", tmp_path / "x")
    with pytest.raises(ValueError):
        emit_reports([report()], "xml", tmp_path / "x")


def test_unwritable_path_raises_os_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_reports([report()], "json", blocker / "sub" / "r.json")


def test_atomic_write_keeps_old_content_on_failure(tmp_path, monkeypatch):
    target = tmp_path / "out.txt"
    target.write_text("old")

    def boom(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        atomic_write(target, "new")
    assert target.read_text() == "old"
    assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]


# -- commands -------------------------------------------------------------------

def test_train_writes_all_outputs(tmp_path, data_file):
    out = tmp_path / "t"
    assert run(["train", "--data", str(data_file), "--out", str(out)] + FAST) == 0
    assert {p.name for p in out.iterdir()} == {"reports.json", "model.npz", "summary.json",
                                               "config.txt", "manifest.json"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["config"]["epochs"] == 2 and manifest["config"]["gamma"] == 0.7
    assert set(manifest) >= {"data_fingerprint", "tool_version", "seed"}
    assert len(json.loads((out / "reports.json").read_text())) == 2


def test_train_from_config_file(tmp_path, data_file):
    cfg = tmp_path / "c.txt"
    cfg.write_text("epochs = 1\nenc_hidden = 8\nd_z = 4\ncls_hidden = 4\nrecord_timing = false\n")
    out = tmp_path / "t"
    assert run(["train", "--data", str(data_file), "--out", str(out), "--config", str(cfg),
                "--format", "csv", "--seed", "3"]) == 0
    saved = parse_config_text((out / "config.txt").read_text(), TrainConfig)
    assert saved["epochs"] == 1 and saved["seed"] == 3
    assert len((out / "reports.csv").read_text().splitlines()) == 2


def test_identical_runs_give_identical_reports(tmp_path, data_file):
    outs = []
    for name in ("a", "b"):
        assert run(["train", "--data", str(data_file), "--out", str(tmp_path / name)] + FAST) == 0
        outs.append((tmp_path / name / "reports.json").read_bytes())
    assert outs[0] == outs[1]
    assert (tmp_path / "a" / "manifest.json").read_bytes() == \
        (tmp_path / "b" / "manifest.json").read_bytes()


def test_eval_reproduces_training_accuracy(tmp_path, data_file, capsys):
    out = tmp_path / "t"
    run(["train", "--data", str(data_file), "--out", str(out)] + FAST)
    final = json.loads((out / "summary.json").read_text())["final_accuracy"]
    capsys.readouterr()
    assert run(["eval", "--model", str(out / "model.npz"), "--data", str(data_file),
                "--out", str(tmp_path / "e")]) == 0
    assert float(capsys.readouterr().out.strip().split("=")[1]) == final
    assert json.loads((tmp_path / "e" / "eval.json").read_text())["accuracy"] == final


def test_sweep_and_ablate(tmp_path, data_file):
    assert run(["sweep", "--data", str(data_file), "--out", str(tmp_path / "s"), "--param", "eta",
                "--values", "0,6"] + FAST) == 0
    rows = (tmp_path / "s" / "sweep.csv").read_text().splitlines()
    assert rows[0] == "eta,accuracy" and len(rows) == 3
    assert run(["ablate", "--data", str(data_file), "--out", str(tmp_path / "a"), "--seeds", "0",
                "--arms", "full,no_rpts"] + FAST) == 0
    payload = json.loads((tmp_path / "a" / "ablation.json").read_text())
    assert set(payload["arms"]) == {"full", "no_rpts"}


def test_gen_data_standard_preset(tmp_path):
    assert run(["gen-data", "--out", str(tmp_path), "--preset", "standard"]) == 0
    header = (tmp_path / "data.txt").read_text().splitlines()[0]
    assert "dim=16" in header and "classes=6" in header
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["per_class"] == SynthConfig().per_class


def test_grad_check_seed_7(capsys):
    assert run(["grad-check", "--seed", "7"]) == 0
    assert "pass" in capsys.readouterr().out


def test_grad_check_fails_under_an_impossible_tolerance():
    assert run(["grad-check", "--tol", "0"]) == 1


# -- exit codes -------------------------------------------------------------------

def test_unknown_config_key_exits_2_naming_it(tmp_path, data_file, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("epochs = 1\nlearning_rate = 0.1\n")
    code = run(["train", "--data", str(data_file), "--out", str(tmp_path / "t"),
                "--config", str(cfg)])
    assert code == 2
    assert "learning_rate" in capsys.readouterr().err
    assert not (tmp_path / "t").exists()


@pytest.mark.parametrize("argv", [
    [], ["frobnicate"], ["train", "--out", "x"], ["grad-check", "--bogus"],
    ["train", "--data", "/nonexistent/d.txt", "--out", "x"],
    ["eval", "--model", "/nonexistent/m.npz", "--data", "d.txt"],
    ["gen-data", "--out", "x", "--n-shared", "9"],
])
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(argv) == 2


def test_malformed_data_file_is_a_runtime_failure(tmp_path, capsys):
    bad = tmp_path / "d.txt"
    bad.write_text("pda-features v1 dim=2 classes=3\ns,0,1\n")
    assert run(["train", "--data", str(bad), "--out", str(tmp_path / "t")] + FAST) == 1
    assert "line 2" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pdalign", "grad-check", "--tol", "0"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 1
    assert "max relative error" in proc.stdout
