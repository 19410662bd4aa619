import csv
import json
import os

import numpy as np
import pytest

from idf import io
from idf.cli import main
from idf.modules import ModelWeights, param_count

rng = np.random.default_rng(12)


@pytest.fixture
def workdir(tmp_path):
    data = tmp_path / "clean"
    data.mkdir()
    for i in range(2):
        io.save_image(rng.random((3, 16, 16)) * 0.6 + 0.2, data / f"img{i}.png")
    io.save_weights(ModelWeights.init(hidden_width=4, seed=2), tmp_path / "w.idfw")
    return tmp_path


def test_param_count(capsys):
    assert main(["param-count"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    n = int(out[-1])
    assert n == param_count(56, 3, 3) and 30000 <= n <= 50000
    assert any(line.startswith("# engine.kappa") for line in out)
    assert main(["param-count", "--set", "train.hidden_width=8"]) == 0
    assert int(capsys.readouterr().out.split()[-1]) == param_count(8, 3, 3)


def test_usage_errors(capsys):
    assert main([]) == 2
    assert main(["denoise", "--in", "x.png"]) == 2
    assert main(["bogus"]) == 2
    assert main(["param-count", "--set", "noequals"]) == 2


def test_validation_errors(workdir, capsys):
    assert main(["param-count", "--set", "engine.nope=1"]) == 4
    cfg = workdir / "bad.cfg"
    cfg.write_text("train.steps = -3\n")
    assert main(["param-count", "--config", str(cfg)]) == 4
    bad = workdir / "bad.idfw"
    data = bytearray((workdir / "w.idfw").read_bytes())
    data[30] ^= 1
    bad.write_bytes(bytes(data))
    assert main(["denoise", "--in", str(workdir / "clean/img0.png"), "--out", str(workdir / "o.png"),
                 "--weights", str(bad)]) == 4


def test_io_errors(workdir):
    assert main(["add-noise", "--in", str(workdir / "missing.png"), "--out", str(workdir / "o.png"),
                 "--noise", "gaussian:25"]) == 3
    (workdir / "fake.png").write_text("not an image")
    assert main(["denoise", "--in", str(workdir / "fake.png"), "--out", str(workdir / "o.png"),
                 "--weights", str(workdir / "w.idfw")]) == 3


def test_add_noise_deterministic(workdir):
    src = str(workdir / "clean/img0.png")
    for name in ("a.png", "b.png"):
        assert main(["add-noise", "--in", src, "--out", str(workdir / name),
                     "--noise", "gaussian:25", "--seed", "3"]) == 0
    assert (workdir / "a.png").read_bytes() == (workdir / "b.png").read_bytes()
    assert io.load_image(workdir / "a.png").shape == (3, 16, 16)


def test_denoise_with_trace(workdir, capsys):
    out = workdir / "den.png"
    trace = workdir / "trace"
    assert main(["denoise", "--in", str(workdir / "clean/img0.png"), "--out", str(out),
                 "--weights", str(workdir / "w.idfw"), "--stop", "fixed", "--T", "3",
                 "--trace", str(trace)]) == 0
    text = capsys.readouterr().out
    assert "iterations_used 3" in text and "stop_reason max_reached" in text
    recs = [json.loads(l) for l in (trace / "trace.jsonl").read_text().splitlines()]
    assert [r["t"] for r in recs] == [1, 2, 3]
    assert [r["dilation"] for r in recs] == [2, 1, 2]
    assert recs[0]["confidence"] is None and recs[1]["confidence"] >= 0
    assert sorted(os.listdir(trace)).count("iter_03.png") == 1
    assert (trace / "kernel_center_02.npy").exists()


def test_denoise_grayscale(workdir):
    io.save_image(rng.random((1, 16, 16)), workdir / "g.png")
    assert main(["denoise", "--in", str(workdir / "g.png"), "--out", str(workdir / "go.png"),
                 "--weights", str(workdir / "w.idfw"), "--T", "2"]) == 0
    assert io.load_image(workdir / "go.png").shape == (1, 16, 16)


def test_eval(workdir, capsys):
    report = workdir / "r.csv"
    assert main(["eval", "--pred", str(workdir / "clean"), "--ref", str(workdir / "clean"),
                 "--report", str(report)]) == 0
    rows = list(csv.reader(report.open()))
    assert rows[0] == ["image", "psnr_db", "ssim"] and len(rows) == 4
    assert float(rows[-1][1]) == 100.0
    empty = workdir / "empty"
    empty.mkdir()
    assert main(["eval", "--pred", str(empty), "--ref", str(workdir / "clean"),
                 "--report", str(report)]) == 4


def test_bench_small(workdir, capsys):
    suite = workdir / "suite.cfg"
    suite.write_text("suite.noises = gaussian:25, salt_pepper:0.02\nengine.max_iterations = 3\n")
    report = workdir / "bench.csv"
    assert main(["bench", "--data", str(workdir / "clean"), "--weights", str(workdir / "w.idfw"),
                 "--suite", str(suite), "--report", str(report)]) == 0
    rows = list(csv.DictReader(report.open()))
    assert [r["noise"] for r in rows] == ["gaussian:25", "salt_pepper:0.02"]
    for r in rows:
        assert 1 <= int(r["iterations_min"]) <= int(r["iterations_max"]) <= 3
        assert int(r["converged"]) + int(r["max_reached"]) == 2
    assert (workdir / "bench.md").read_text().startswith("| Noise |")


def test_train_tiny(workdir):
    out = workdir / "trained.idfw"
    args = ["train", "--data", str(workdir / "clean"), "--out", str(out),
            "--set", "train.steps=4", "--set", "train.hidden_width=4", "--set", "train.patch_size=8",
            "--set", "train.batch_size=1", "--set", "train.unroll_T=1",
            "--set", "train.checkpoint_every=2"]
    assert main(args) == 0
    w = io.load_weights(out)
    assert w.hidden_width == 4
    assert (workdir / "trained.idfw.step2").exists()
    rows = list(csv.reader((workdir / "trained_log.csv").open()))
    assert rows[0] == ["step", "loss", "wall_ms"] and len(rows) == 5
    first = out.read_bytes()
    assert main(args) == 0
    assert out.read_bytes() == first
