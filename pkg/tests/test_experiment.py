import json

import pytest
import torch

from mifnet.bundle import ModelBundle
from mifnet.exceptions import ValidationError
from mifnet.experiment import ExperimentManifest, run_experiment
from mifnet.filters import IfNet, MifNet, Mode
from mifnet.frames import write_yuv_sequence
from mifnet.rfs import RfsNet
from mifnet.synthetic import natural_image, panning_clip


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("exp")
    write_yuv_sequence(root / "clip.yuv", panning_clip(natural_image("coffee"), 6, 64, 64, seed=3))
    torch.manual_seed(0)
    ModelBundle.from_module(MifNet(growth=4, mc_width=8), "mif").save(root / "mif.bundle")
    ModelBundle.from_module(IfNet(growth=4), "if").save(root / "if.bundle")
    ModelBundle.from_module(RfsNet(), "rfs").save(root / "rfs.bundle")
    return root


def _manifest(root, out="out", **extra):
    models = {str(q): {"mif": "mif.bundle", "if": "if.bundle"} for q in (22, 27, 32, 37)}
    obj = dict(sequences=[dict(name="coffee", path="clip.yuv", width=64, height=64)],
               models=models, rfs_model="rfs.bundle", output_dir=out, seed=1)
    obj.update(extra)
    path = root / f"{out}.json"
    path.write_text(json.dumps(obj))
    return ExperimentManifest.from_json(path)


def test_identity_models_give_zero_bd(workspace):
    # freshly initialised filters end in a zero layer, so every candidate equals the URF
    report = run_experiment(_manifest(workspace))
    rate, gain = report.bd["coffee"]
    assert rate == 0.0 and gain == 0.0
    assert all(r["psnr_enh"] == r["psnr_urf"] for r in report.frames)
    assert {r["mode"] for r in report.frames} == {Mode.PASSTHROUGH.value}
    for key in ("rd", "bd", "frames", "summary"):
        assert report.files[key].is_file()
    assert (workspace / "out" / "decisions_coffee_qp37.csv").is_file()
    assert "BD-PSNR +0.0000 dB" in (workspace / "out" / "summary.txt").read_text()


def test_anchor_and_test_share_rates(workspace):
    report = run_experiment(_manifest(workspace, out="rates"))
    anchor, test = report.rd["coffee:anchor"], report.rd["coffee:mif"]
    assert [p.bitrate for p in anchor] == [p.bitrate for p in test]
    assert [p.bitrate for p in anchor] == sorted((p.bitrate for p in anchor), reverse=True)


def test_deterministic_outputs(workspace):
    run_experiment(_manifest(workspace, out="a"))
    run_experiment(_manifest(workspace, out="b"))
    for name in ("rd.csv", "bd.csv", "frames.csv", "decisions_coffee_qp22.csv"):
        assert (workspace / "a" / name).read_bytes() == (workspace / "b" / name).read_bytes()


def test_too_few_qps_reports_na(workspace):
    report = run_experiment(_manifest(workspace, out="short", qps=[32, 37]))
    assert report.bd["coffee"] is None
    assert "n/a" in report.files["summary"].read_text()


def test_manifest_errors(workspace):
    with pytest.raises(ValidationError):
        ExperimentManifest.from_dict({"models": {}})
    m = _manifest(workspace, out="bad", qps=[17])
    with pytest.raises(ValidationError, match="QP 17"):
        m.validate()
    m = _manifest(workspace, out="missing", rfs_model="nope.bundle")
    with pytest.raises(ValidationError, match="RFS"):
        m.validate()
