import json
import subprocess
import sys

import numpy as np
import pytest

from mifnet.bundle import ModelBundle
from mifnet.cli import main
from mifnet.frames import read_yuv_sequence
from mifnet.metrics import RdPoint, write_rd_csv


def _run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def clip(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["simulate", "--image", "coffee", "--width", "64", "--height", "64", "--frames", "6",
                 "--qp", "37", "--seed", "2", "--out-dir", str(root)]) == 0
    (root / "train.cfg").write_text("batch_size = 2\npatch = 32\niterations = 3\ngrowth = 4\n"
                                    "max_phase1_fraction = 0.5\n")
    return root


def _clip_flags(root):
    return ["--raw", root / "raw.yuv", "--urf", root / "urf.yuv", "--partitions", root / "partitions.json",
            "--width", 64, "--height", 64]


def test_simulate_outputs(clip):
    raws = read_yuv_sequence(clip / "raw.yuv", 64, 64)
    urfs = read_yuv_sequence(clip / "urf.yuv", 64, 64)
    assert len(raws) == len(urfs) == 6
    meta = json.loads((clip / "simulate.json").read_text())
    assert meta["qps"] == [37, 41, 40, 41, 37, 41]
    assert len(json.loads((clip / "partitions.json").read_text())) == 6


def test_simulate_from_file_with_codec_config(clip, tmp_path, capsys):
    (tmp_path / "codec.cfg").write_text("gop_size = 2\nqp_offsets = 0, 3\n")
    code, out, _ = _run(["simulate", "--input", clip / "raw.yuv", "--width", 64, "--height", 64, "--frames", 4,
                         "--qp", 30, "--codec-config", tmp_path / "codec.cfg", "--out-dir", tmp_path], capsys)
    assert code == 0 and json.loads(out)["bitrate_estimate"] > 0
    assert json.loads((tmp_path / "simulate.json").read_text())["qps"] == [30, 33, 30, 33]


def test_train_and_enhance_pipeline(clip, capsys):
    cfg = clip / "train.cfg"
    code, out, err = _run(["train-rfs", "--synthetic", 20, "--iterations", 5, "--out", clip / "rfs.bundle"], capsys)
    assert code == 0, err
    code, out, err = _run(["train-if", *_clip_flags(clip), "--config", cfg, "--out", clip / "if.bundle"], capsys)
    assert code == 0, err
    assert ModelBundle.load(clip / "if.bundle").kind == "if"
    code, out, err = _run(["train-mif", *_clip_flags(clip), "--config", cfg, "--rfs-model", clip / "rfs.bundle",
                           "--out", clip / "mif.bundle"], capsys)
    assert code == 0, err
    assert json.loads(out)["phase2_start"] == 1

    models = ["--mif-model", clip / "mif.bundle", "--if-model", clip / "if.bundle", "--rfs-model",
              clip / "rfs.bundle", "--partitions", clip / "partitions.json", "--width", 64, "--height", 64,
              "--urf", clip / "urf.yuv"]
    code, out, err = _run(["enhance", *models, "--raw", clip / "raw.yuv", "--out", clip / "enc.yuv"], capsys)
    assert code == 0, err
    info = json.loads(out)
    assert sum(info["modes"].values()) == 6
    code, out, err = _run(["enhance", *models, "--decisions", info["decisions"], "--out", clip / "dec.yuv"], capsys)
    assert code == 0, err
    assert (clip / "enc.yuv").read_bytes() == (clip / "dec.yuv").read_bytes()


def test_evaluate(tmp_path, capsys):
    anchor = [RdPoint(1000, 30.0), RdPoint(1800, 33.1), RdPoint(3200, 35.9), RdPoint(6000, 38.4)]
    shifted = [RdPoint(p.bitrate * 0.9, p.psnr) for p in anchor]
    write_rd_csv(tmp_path / "rd.csv", {"anchor": anchor, "test": shifted})
    code, out, _ = _run(["evaluate", "--rd", tmp_path / "rd.csv", "--anchor", "anchor"], capsys)
    assert code == 0
    header, row = out.strip().splitlines()
    assert header == "test,anchor,bd_rate_percent,bd_psnr_db"
    assert float(row.split(",")[2]) == pytest.approx(-10.0, abs=0.1)
    code, out, _ = _run(["evaluate", "--rd", tmp_path / "rd.csv", "--anchor", "anchor", "--out",
                         tmp_path / "bd.csv"], capsys)
    assert code == 0 and (tmp_path / "bd.txt").read_text().startswith("test vs anchor: BD-BR -10.0")


def test_run_experiment(clip, tmp_path, capsys):
    models = {str(q): {"if": str(clip / "if.bundle")} for q in (22, 27, 32, 37)}
    manifest = dict(sequences=[dict(path=str(clip / "raw.yuv"), width=64, height=64, frames=4)], models=models,
                    output_dir=str(tmp_path / "out"))
    (tmp_path / "m.json").write_text(json.dumps(manifest))
    if not (clip / "if.bundle").exists():
        pytest.skip("pipeline test did not run")
    code, out, err = _run(["run-experiment", tmp_path / "m.json"], capsys)
    assert code == 0, err
    assert np.isfinite(json.loads(out)["mean_bd_psnr"])
    assert (tmp_path / "out" / "summary.txt").is_file()


@pytest.mark.parametrize("argv,category,code", [
    (["evaluate", "--rd", "/nonexistent.csv", "--anchor", "a"], "io", 4),
    (["run-experiment", "/nonexistent.json"], "io", 4),
    (["simulate", "--width", "64", "--height", "64", "--out-dir", "{tmp}"], "validation", 2),
    (["simulate", "--width", "60", "--height", "64", "--image", "coffee", "--out-dir", "{tmp}"], "validation", 2),
    (["train-if", "--config", "{tmp}/bad.cfg", "--out", "{tmp}/x.bundle", "--data", "{tmp}/d.json"], "config", 3),
    (["train-if", "--out", "{tmp}/x.bundle", "--data", "{tmp}/broken.json"], "io", 4),
    (["enhance", "--urf", "u.yuv", "--width", "8", "--height", "8", "--out", "o.yuv"], "validation", 2),
    (["frobnicate"], "usage", 2),
    (["simulate", "--width", "-4", "--height", "8", "--out-dir", "x"], "usage", 2),
])
def test_errors_are_one_line(tmp_path, capsys, argv, category, code):
    (tmp_path / "bad.cfg").write_text("batch_size = many\n")
    (tmp_path / "d.json").write_text("[]")
    (tmp_path / "broken.json").write_text("[{")
    argv = [a.replace("{tmp}", str(tmp_path)) for a in argv]
    try:
        got = main(argv)
    except SystemExit as exc:
        got = exc.code
    _, err = capsys.readouterr()
    assert got == code
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith(f"error[{category}]: ")


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mifnet.cli", "evaluate", "--rd", str(tmp_path / "none.csv"),
                           "--anchor", "a"], capture_output=True, text=True)
    assert proc.returncode == 4 and proc.stderr.startswith("error[io]: ")
