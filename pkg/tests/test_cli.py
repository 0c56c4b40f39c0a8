import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from clustergan.cli import main
from clustergan.data import SyntheticSpec, generate_synthetic, write_matrix_csv
from clustergan.networks import load_checkpoint

TINY_CONFIG = """
[train]
epochs = 2
hidden_width = 16
batch_size = 32
checkpoint_every = 1

[data]
source = synthetic
points_per_component = 20
"""


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY_CONFIG)
    assert main(["train", "--config", str(cfg), "--out", str(root / "a"), "--threads", "1"]) == 0
    return root, cfg


def test_train_writes_artifacts(trained):
    root, _ = trained
    out = root / "a"
    for name in ("manifest.json", "metrics.json", "train_log.csv", "latent.csv", "checkpoint_final.npz",
                 "checkpoint_epoch00001.npz", "checkpoint_epoch00002.npz"):
        assert (out / name).is_file(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["threads"] == 1
    assert manifest["config"]["train"]["epochs"] == 2
    assert manifest["dataset"]["rows"] == 80
    assert set(manifest["versions"]) == {"clustergan", "numpy", "scipy", "python"}
    assert manifest["checkpoints"] == ["checkpoint_epoch00001.npz", "checkpoint_epoch00002.npz",
                                       "checkpoint_final.npz"]
    nets, config = load_checkpoint(out / "checkpoint_final.npz")
    assert set(nets) == {"G", "E", "D"} and config["epochs"] == 2
    assert not list(out.glob("*.tmp"))


def test_identical_runs_give_identical_manifests(trained):
    root, cfg = trained
    assert main(["train", "--config", str(cfg), "--out", str(root / "b")]) == 0
    for name in ("manifest.json", "metrics.json", "latent.csv", "checkpoint_final.npz"):
        assert _digest(root / "a" / name) == _digest(root / "b" / name), name


def test_seed_override_changes_the_run(trained, tmp_path):
    _, cfg = trained
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path), "--seed", "3", "--epochs", "1"]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["config"]["train"]["epochs"] == 1


def test_run_dir_from_environment(trained, tmp_path, monkeypatch):
    _, cfg = trained
    monkeypatch.setenv("CLUSTERGAN_RUN_DIR", str(tmp_path))
    assert main(["train", "--config", str(cfg), "--epochs", "0"]) == 0
    assert (tmp_path / "train" / "manifest.json").is_file()


def test_decode_and_eval_from_checkpoint(trained, tmp_path):
    root, _ = trained
    ds = generate_synthetic(SyntheticSpec(points_per_component=3, seed=9))
    data = tmp_path / "x.csv"
    write_matrix_csv(data, ds.X, ds.y)
    before = _digest(data)
    ckpt = str(root / "a" / "checkpoint_final.npz")
    out = tmp_path / "z.csv"
    assert main(["decode", "--checkpoint", ckpt, "--data", str(data), "--out", str(out), "--tau", "5"]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 13
    header = lines[0].split(",")
    assert "loss" in header and "label" in header
    assert _digest(data) == before  # inputs are never modified
    truth = tmp_path / "truth.csv"
    truth.write_text("label\n" + "\n".join(str(v) for v in ds.y) + "\n")
    assert main(["eval", "--checkpoint", ckpt, "--data", str(data), "--truth", str(truth),
                 "--out", str(tmp_path / "m.json")]) == 0
    doc = json.loads((tmp_path / "m.json").read_text())
    assert 0.0 <= doc["acc"] <= 1.0


def test_eval_identical_labels(tmp_path, capsys):
    labels = tmp_path / "y.csv"
    labels.write_text("label\n0\n0\n1\n1\n2\n")
    rows = tmp_path / "rows.csv"
    assert main(["eval", "--pred", str(labels), "--truth", str(labels), "--csv-row", str(rows)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert (doc["acc"], doc["nmi"], doc["ari"]) == (1.0, 1.0, 1.0)
    assert rows.read_text().splitlines() == ["name,acc,nmi,ari", "run,1.0,1.0,1.0"]


def test_eval_length_mismatch_exits_one(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    a.write_text("0\n1\n")
    b.write_text("0\n1\n1\n")
    assert main(["eval", "--pred", str(a), "--truth", str(b)]) == 1


def test_interpolate(trained, tmp_path):
    root, _ = trained
    out = tmp_path / "interp.csv"
    assert main(["interpolate", "--checkpoint", str(root / "a" / "checkpoint_final.npz"), "--out", str(out),
                 "--pairs", "0:1,2:3", "--steps", "4"]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 1 + 2 * 4
    assert lines[0].startswith("pair,mode_a,mode_b,mu,x_0")
    assert main(["interpolate", "--checkpoint", str(root / "a" / "checkpoint_final.npz"), "--out", str(out),
                 "--pairs", "0-1"]) == 1


def test_sweep_k_and_compare_priors(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(TINY_CONFIG + "\n[experiment]\nmethod = kmeans_raw\neval_rows = 20\n")
    assert main(["sweep-k", "--config", str(cfg), "--ks", "2,4", "--out", str(tmp_path / "s")]) == 0
    rows = (tmp_path / "s" / "sweep.csv").read_text().splitlines()
    assert rows[0] == "k,selected_run,acc,nmi,ari" and len(rows) == 3
    assert main(["compare-priors", "--config", str(cfg), "--priors", "normal,discrete_continuous",
                 "--epochs", "1", "--out", str(tmp_path / "p")]) == 0
    assert (tmp_path / "p" / "latent_normal.csv").is_file()
    metrics = json.loads((tmp_path / "p" / "metrics.json").read_text())
    assert set(metrics) == {"normal", "discrete_continuous"}


def test_lemma_check_constructed(tmp_path, capsys):
    assert main(["lemma-check", "--constructed", "--n", "600", "--eval-rows", "100", "--tau", "100",
                 "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "linear_discrete_continuous: ACC = 1.000, NMI = 1.000, ARI = 1.000" in out
    assert json.loads((tmp_path / "manifest.json").read_text())["command"] == "lemma-check"


def test_missing_config_exits_one_with_path(tmp_path, capsys):
    missing = tmp_path / "absent.ini"
    assert main(["train", "--config", str(missing)]) == 1
    assert f"config file not found: {missing}" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["train"], ["train", "--config", "x", "--bogus"], ["frobnicate"],
                                  ["eval", "--truth", "t.csv"]])
def test_usage_errors_exit_one(argv):
    assert main(argv) == 1


def test_numerical_abort_exits_two(tmp_path):
    X = np.full((40, 5), 0.5)
    X[3, 1] = np.nan
    data = tmp_path / "bad.csv"
    write_matrix_csv(data, X)
    cfg = tmp_path / "bad.ini"
    cfg.write_text(f"[train]\nepochs = 1\nhidden_width = 8\nbatch_size = 40\n[data]\nsource = csv\npath = {data}\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "clustergan", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "0.1.0" in proc.stdout
