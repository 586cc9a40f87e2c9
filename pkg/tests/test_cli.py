import json
import struct

import numpy as np
import pytest

from protoseg import tensor_io
from protoseg.cli import run
from protoseg.tensor_io import LabelArray


def synth_dir(tmp_path, **cfg):
    doc = {"seed": 3, "classes": 4, "dims": 16, "sigma": 0.0, "points_per_class": 50, "points_per_scan": 100,
           "flip_rate": 0.3} | cfg  # fmt: skip
    (tmp_path / "synth.json").write_text(json.dumps(doc))
    assert run(["synth", "--config", str(tmp_path / "synth.json"), "--out", str(tmp_path / "d")]) == 0
    return tmp_path / "d"


@pytest.fixture
def scene(tmp_path):
    d = synth_dir(tmp_path)
    assert run(["build-bank", "--manifest", str(d / "manifest.json"), "--out", str(tmp_path / "bank.json")]) == 0
    return tmp_path, d


def test_version(capsys):
    assert run(["--version"]) == 0
    out = capsys.readouterr().out
    assert "igft v1" in out and "igl v1" in out


def test_classify_nn_zero_noise(scene):
    tmp, d = scene
    out = tmp / "nn.igl"
    assert run(["classify", "--mode", "nn", "--bank", str(tmp / "bank.json"), "--points", str(d / "points.igft"),
                "--out", str(out)]) == 0  # fmt: skip
    np.testing.assert_array_equal(tensor_io.read_labels(out).labels, tensor_io.read_labels(d / "gt.igl").labels)


def test_fit_then_classify_lr(scene):
    tmp, d = scene
    assert run(["fit", "--bank", str(tmp / "bank.json"), "--C", "1.0", "--out", str(tmp / "model.igft")]) == 0
    assert (tmp / "model.json").exists()
    assert run(["classify", "--model", str(tmp / "model.igft"), "--points", str(d / "points.igft"),
                "--out", str(tmp / "lr.igl"), "--subclass-out", str(tmp / "sub.igl")]) == 0  # fmt: skip
    np.testing.assert_array_equal(tensor_io.read_labels(tmp / "lr.igl").labels, tensor_io.read_labels(d / "gt.igl").labels)
    np.testing.assert_array_equal(
        tensor_io.read_labels(tmp / "sub.igl").labels, tensor_io.read_labels(d / "gt_subclass.igl").labels
    )


def test_threshold_and_retrieve(scene):
    tmp, d = scene
    assert run(["classify", "--mode", "threshold", "--tau", "0.99", "--bank", str(tmp / "bank.json"),
                "--points", str(d / "points.igft"), "--out", str(tmp / "t.igl")]) == 0  # fmt: skip
    t = tensor_io.read_labels(tmp / "t.igl").labels
    np.testing.assert_array_equal(t, tensor_io.read_labels(d / "gt.igl").labels)
    assert run(["retrieve", "--subclass", "class1_sub0", "--tau", "0.99", "--bank", str(tmp / "bank.json"),
                "--points", str(d / "points.igft"), "--out", str(tmp / "m.igl")]) == 0  # fmt: skip
    mask = tensor_io.read_labels(tmp / "m.igl").labels
    sub = tensor_io.read_labels(d / "gt_subclass.igl").labels
    np.testing.assert_array_equal(mask, (sub == 2).astype(np.uint32))
    assert run(["classify", "--mode", "threshold", "--bank", str(tmp / "bank.json"), "--points",
                str(d / "points.igft"), "--out", str(tmp / "x.igl")]) == 2  # fmt: skip


def test_ensemble(tmp_path, rng):
    a = rng.normal(size=(10, 4)).astype(np.float32)
    b = rng.normal(size=(10, 6)).astype(np.float32)
    tensor_io.write_feature_matrix(a, tmp_path / "a.igft")
    tensor_io.write_feature_matrix(b, tmp_path / "b.igft")
    assert run(["ensemble", "--a", str(tmp_path / "a.igft"), "--b", str(tmp_path / "b.igft"), "--renorm",
                "--out", str(tmp_path / "ab.igft")]) == 0  # fmt: skip
    ab = tensor_io.read_feature_matrix(tmp_path / "ab.igft")
    assert ab.shape == (10, 10)
    tensor_io.write_feature_matrix(b[:3], tmp_path / "c.igft")
    assert run(["ensemble", "--a", str(tmp_path / "a.igft"), "--b", str(tmp_path / "c.igft"),
                "--out", str(tmp_path / "x.igft")]) == 3  # fmt: skip


def test_consist(tmp_path):
    d = synth_dir(tmp_path, flip_rate=0.0)
    assert run(["consist", "--scans", str(d / "scans.json"), "--voxel", "0.10", "--out", str(tmp_path / "pl")]) == 0
    files = sorted((tmp_path / "pl").iterdir())
    assert len(files) == 5
    for f in files:
        clean = tensor_io.read_labels(d / "scans" / f"{f.stem}_clean.igl").labels
        np.testing.assert_array_equal(tensor_io.read_labels(f).labels, clean)


def test_eval(scene, capsys):
    tmp, d = scene
    assert run(["eval", "--gt", str(d / "gt.igl"), "--pred", str(d / "gt.igl"), "--classes",
                str(d / "manifest.json"), "--out", str(tmp / "r.csv")]) == 0  # fmt: skip
    assert (tmp / "r.csv").read_text().splitlines()[-1] == "mIoU,1.0"
    assert "mIoU" in capsys.readouterr().out


def test_crop(tmp_path):
    img = np.full((8, 8, 3), 255, np.uint8)
    img[2:5, 3:4] = 0
    tensor_io.write_image(img, tmp_path / "a.ppm")
    assert run(["crop", "--image", str(tmp_path / "a.ppm"), "--out", str(tmp_path / "b.ppm")]) == 0
    assert tensor_io.read_image(tmp_path / "b.ppm").shape == (3, 1, 3)


class TestExitCodes:
    def test_missing_points(self, capsys):
        assert run(["classify", "--mode", "nn", "--out", "x.igl"]) == 2
        assert "--points" in capsys.readouterr().err

    def test_unknown_subcommand(self):
        assert run(["frobnicate"]) == 2

    def test_bad_numeric_option(self):
        assert run(["fit", "--bank", "b.json", "--C", "-1", "--out", "m.igft"]) == 2

    def test_corrupt_igft(self, scene, capsys):
        tmp, _ = scene
        bad = tmp / "bad.igft"
        bad.write_bytes(struct.pack("<4sIIIQQ", b"IGFT", 1, 1, 2, 4, 4) + bytes(60))
        code = run(["classify", "--mode", "nn", "--bank", str(tmp / "bank.json"), "--points", str(bad),
                    "--out", str(tmp / "o.igl")])  # fmt: skip
        err = capsys.readouterr().err.strip()
        assert code == 3
        assert len(err.splitlines()) == 1
        assert "bad.igft" in err and "offset=32" in err

    def test_missing_file(self, tmp_path):
        assert run(["classify", "--mode", "nn", "--bank", str(tmp_path / "none.json"), "--points",
                    str(tmp_path / "none.igft"), "--out", str(tmp_path / "o.igl")]) == 3  # fmt: skip

    def test_numeric_failure(self, tmp_path, capsys):
        tensor_io.write_feature_matrix(np.zeros((3, 4), np.float32), tmp_path / "z.igft")
        (tmp_path / "m.json").write_text(json.dumps(
            {"classes": ["a"], "subclasses": [{"name": "x", "class": 0, "features": ["z.igft"]}]}))  # fmt: skip
        assert run(["build-bank", "--manifest", str(tmp_path / "m.json"), "--out", str(tmp_path / "b.json")]) == 4
        assert "error[4]" in capsys.readouterr().err

    def test_single_subclass_fit_is_numeric(self, tmp_path):
        tensor_io.write_feature_matrix(np.ones((3, 4), np.float32), tmp_path / "z.igft")
        (tmp_path / "m.json").write_text(json.dumps(
            {"classes": ["a"], "subclasses": [{"name": "x", "class": 0, "features": ["z.igft"]}]}))  # fmt: skip
        assert run(["build-bank", "--manifest", str(tmp_path / "m.json"), "--out", str(tmp_path / "b.json")]) == 0
        assert run(["fit", "--bank", str(tmp_path / "b.json"), "--out", str(tmp_path / "m.igft")]) == 4

    def test_label_out_of_range(self, scene):
        tmp, d = scene
        tensor_io.write_labels(LabelArray(np.full(200, 9)), tmp / "p.igl")
        assert run(["eval", "--gt", str(d / "gt.igl"), "--pred", str(tmp / "p.igl"), "--classes",
                    str(d / "manifest.json")]) == 3  # fmt: skip

    def test_bad_manifest_json(self, tmp_path):
        (tmp_path / "m.json").write_text("{not json")
        assert run(["build-bank", "--manifest", str(tmp_path / "m.json"), "--out", str(tmp_path / "b.json")]) == 3
