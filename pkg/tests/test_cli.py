import csv
import json

import numpy as np
import pytest

from sgewc import evaluate as ev
from sgewc.cli import main

SYN_CFG = """\
source = synthetic
tasks = 0;1
steps = 30
batch_size = 32
lambda = 1000
fisher_samples = 16
seed = 0
k = 4
z_dim = 3
hidden = 8
synthetic_means = -1,0;1,0;0,1
synthetic_n = 200
n_gen = 256
"""


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "syn.cfg"
    path.write_text(SYN_CFG)
    return path


def test_missing_config_exits_nonzero(tmp_path, capsys):
    code = main(["run", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path / "o")])
    assert code != 0
    assert "config not found" in capsys.readouterr().err


def test_bad_config_names_the_problem(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("tasks = 0;7\nk = 2\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) != 0
    assert "capacity" in capsys.readouterr().err


def test_run_writes_artifacts_and_is_reproducible(tmp_path, cfg):
    for name in ("a", "b"):
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / name), "--lambda", "100"]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    for f in ("task0.ckpt", "task1.ckpt", "retention.json", "runlog.jsonl"):
        assert (a / f).exists()
    assert (a / "task1.ckpt").read_bytes() == (b / "task1.ckpt").read_bytes()
    assert (a / "retention.json").read_text() == (b / "retention.json").read_text()
    rep = ev.RetentionReport.from_json((a / "retention.json").read_text())
    assert rep.lam == 100.0 and rep.regime == "ewc"
    first = json.loads((a / "runlog.jsonl").read_text().splitlines()[0])
    assert set(first) >= {"task", "step", "d_loss", "g_loss", "penalty", "wall_ms"}


def test_sample_flags_untrained_class(tmp_path, cfg, capsys):
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    out = tmp_path / "s"
    code = main(["sample", "--config", str(cfg), "--checkpoint", str(tmp_path / "r" / "task0.ckpt"),
                 "--classes", "0,2", "--rows", "5", "--out", str(out)])
    assert code == 0
    meta = json.loads((out / "samples.json").read_text())
    assert meta["untrained"] == [2] and meta["trained"] == [0]
    assert "class 2" in capsys.readouterr().err
    rows = list(csv.reader((out / "samples.csv").open()))
    assert rows[0] == ["class", "x", "y"] and len(rows) == 1 + 2 * 5
    # same checkpoint, config and seed -> same bytes
    main(["sample", "--config", str(cfg), "--checkpoint", str(tmp_path / "r" / "task0.ckpt"),
          "--classes", "0,2", "--rows", "5", "--out", str(tmp_path / "s2")])
    assert (out / "samples.csv").read_bytes() == (tmp_path / "s2" / "samples.csv").read_bytes()


def test_sample_rejects_class_beyond_capacity(tmp_path, cfg, capsys):
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "r")])
    code = main(["sample", "--config", str(cfg), "--checkpoint", str(tmp_path / "r" / "task0.ckpt"),
                 "--classes", "9", "--out", str(tmp_path / "s")])
    assert code != 0 and "capacity" in capsys.readouterr().err


def test_drift_writes_trace(tmp_path, cfg):
    out = tmp_path / "d"
    assert main(["drift", "--config", str(cfg), "--classes", "0", "--cadence", "10", "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "drift.csv").open()))
    assert [int(r["step"]) for r in rows] == [0, 10, 20, 30]
    assert float(rows[0]["distance"]) == 0.0
    assert all(float(r["distance"]) >= 0 for r in rows)


def test_report_rows_per_lambda_seed_class(tmp_path, cfg):
    runs = []
    for lam in (100, 1000, 5000):
        for seed in (0, 1):
            d = tmp_path / f"l{lam}s{seed}"
            assert main(["run", "--config", str(cfg), "--lambda", str(lam), "--seed", str(seed), "--out", str(d)]) == 0
            runs.append(str(d))
    out = tmp_path / "report.csv"
    assert main(["report", *runs, "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["lambda", "seed", "regime", "class", "metric", "value"]
    body = rows[1:]
    assert len(body) == 3 * 2 * 2
    assert {(r[0], r[1], r[3]) for r in body} == {
        (str(float(lam)), str(s), str(c)) for lam in (100, 1000, 5000) for s in (0, 1) for c in (0, 1)
    }
    assert all(r[4] == "mean_gap" and float(r[5]) >= 0 for r in body)


def test_report_missing_run_dir(tmp_path, capsys):
    assert main(["report", str(tmp_path / "none"), "--out", str(tmp_path / "r.csv")]) != 0
    assert "retention.json" in capsys.readouterr().err


def test_fisher_map_needs_image_config(tmp_path, cfg, capsys):
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "r")])
    code = main(["fisher-map", "--config", str(cfg), "--checkpoint", str(tmp_path / "r" / "task1.ckpt"),
                 "--out", str(tmp_path / "f")])
    assert code != 0 and "mnist" in capsys.readouterr().err


def test_mnist_sample_and_fisher_map(tmp_path):
    from helpers import MNIST_DIR

    cfg = tmp_path / "m.cfg"
    cfg.write_text(f"source = mnist\nmnist_dir = {MNIST_DIR}\ntasks = 1\nepochs = 1\nfisher_samples = 8\n")
    from sgewc.nets import GanSpec, init_cond_gan, save_checkpoint

    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, init_cond_gan(GanSpec(), np.random.default_rng(0)), task_classes=[(1,)])
    assert main(["sample", "--config", str(cfg), "--checkpoint", str(ckpt), "--classes", "1,3",
                 "--rows", "2", "--out", str(tmp_path / "s")]) == 0
    grid = ev.read_pgm(tmp_path / "s" / "samples.pgm")
    assert grid.shape == (2 * 28, 2 * 28)
    assert (tmp_path / "s" / "samples.png").exists()
    assert main(["fisher-map", "--config", str(cfg), "--checkpoint", str(ckpt), "--classes", "1",
                 "--out", str(tmp_path / "f")]) == 0
    assert ev.read_pgm(tmp_path / "f" / "fisher_map.pgm").shape == (28, 28)
