import json
import subprocess
import sys

import numpy as np
import pytest

from voxalign.cli import main
from voxalign.evaluation import PhantomSpec
from voxalign.io_formats import read_metaimage, read_transform_json, write_metaimage


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("phantom")
    spec = PhantomSpec(dims=(40, 40, 16), rotation_deg=(0, 0, 6), translation=(1.5, -1.0, 0.5), blur_mm=0.3, noise=0.005)
    (d / "spec.json").write_text(json.dumps(spec.to_dict()))
    assert main(["phantom", "--spec", str(d / "spec.json"), "--out-dir", str(d)]) == 0
    return d


def _json_out(capsys):
    return json.loads(capsys.readouterr().out)


def test_phantom_outputs(phantom_dir):
    for name in ("fixed.mha", "moving.mha", "landmarks.csv", "ground_truth.json"):
        assert (phantom_dir / name).exists()


def test_register_writes_transform(phantom_dir, tmp_path, capsys):
    out = tmp_path / "t.json"
    code = main(["register", "--fixed", str(phantom_dir / "fixed.mha"), "--moving", str(phantom_dir / "moving.mha"),
                 "--out", str(out), "--affine-only", "--resampled", str(tmp_path / "r.mha")])
    assert code == 0
    summary = _json_out(capsys)
    assert summary["init"] == "pca"
    assert read_transform_json(out).to_transform().n_parameters == 12
    assert read_metaimage(tmp_path / "r.mha").dims == (40, 40, 16)

    assert main(["tre", "--landmarks", str(phantom_dir / "landmarks.csv"), "--transform", str(out)]) == 0
    report = _json_out(capsys)
    assert report["mean"] < 0.3


def test_register_config_file(phantom_dir, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bspline_stage": False, "rsgd_max_iterations": 3, "shrink_factors": [[1, 1, 1]]}))
    code = main(["register", "--fixed", str(phantom_dir / "fixed.mha"), "--moving", str(phantom_dir / "moving.mha"),
                 "--out", str(tmp_path / "t.json"), "--config", str(cfg), "--init", "identity"])
    assert code == 0
    summary = _json_out(capsys)
    assert len(summary["stages"]) == 1
    assert summary["stages"][0]["iterations"] <= 3


def test_missing_required_flag(capsys):
    assert main(["register", "--moving", "m.mha", "--out", "t.json"]) == 1
    assert "--fixed" in capsys.readouterr().err


def test_unknown_config_key(phantom_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"nope": 1}')
    code = main(["register", "--fixed", str(phantom_dir / "fixed.mha"), "--moving", str(phantom_dir / "moving.mha"),
                 "--out", str(tmp_path / "t.json"), "--config", str(cfg)])
    assert code == 1


def test_tre_identity_on_self_pairs(tmp_path, capsys):
    p = tmp_path / "lm.csv"
    p.write_text("label,fx,fy,fz,mx,my,mz\na,1,2,3,1,2,3\nb,-4,0,2.5,-4,0,2.5\n")
    assert main(["tre", "--landmarks", str(p)]) == 0
    captured = capsys.readouterr()
    assert "mean" in captured.err and "0.000" in captured.err
    assert json.loads(captured.out)["mean"] == 0.0


def test_runtime_failure_exit_code(phantom_dir, tmp_path, capsys):
    far = read_metaimage(phantom_dir / "moving.mha")
    far = far.with_data(far.data)
    moved = type(far)(far.data, far.spacing, far.origin + 1000.0, far.direction)
    write_metaimage(moved, tmp_path / "far.mha")
    code = main(["register", "--fixed", str(phantom_dir / "fixed.mha"), "--moving", str(tmp_path / "far.mha"),
                 "--out", str(tmp_path / "t.json"), "--init", "identity", "--affine-only"])
    assert code == 2
    assert "StageError" in capsys.readouterr().err


def test_missing_input_is_runtime_failure(tmp_path):
    assert main(["cluster", "--volume", str(tmp_path / "absent.mha")]) == 2


def test_metric_threads_env(phantom_dir, monkeypatch, capsys):
    args = ["metric", "--fixed", str(phantom_dir / "fixed.mha"), "--moving", str(phantom_dir / "moving.mha"),
            "--transform", str(phantom_dir / "ground_truth.json"), "--gradient"]
    assert main(args) == 0
    one = _json_out(capsys)
    monkeypatch.setenv("VOXALIGN_THREADS", "3")
    assert main(args) == 0
    three = _json_out(capsys)
    assert one["value"] == three["value"]
    assert one["gradient"] == three["gradient"]
    assert one["sample_count"] == int(0.09 * 40 * 40 * 16)
    monkeypatch.setenv("VOXALIGN_THREADS", "many")
    assert main(args) == 1


def test_cluster_and_pca_init(phantom_dir, tmp_path, capsys):
    assert main(["cluster", "--volume", str(phantom_dir / "fixed.mha"), "--mask", str(tmp_path / "mask.mha")]) == 0
    doc = _json_out(capsys)
    mask = read_metaimage(tmp_path / "mask.mha")
    assert doc["foreground_voxels"] == int(mask.data.sum())
    assert set(np.unique(mask.data)) <= {0.0, 1.0}

    assert main(["pca-init", "--fixed", str(phantom_dir / "fixed.mha"), "--moving", str(phantom_dir / "moving.mha"),
                 "--out", str(tmp_path / "seed.json")]) == 0
    doc = _json_out(capsys)
    assert np.linalg.det(np.array(doc["rotation"])) == pytest.approx(1.0)
    assert read_transform_json(tmp_path / "seed.json").to_transform().n_parameters == 12


def test_checkerboard_and_resample(phantom_dir, tmp_path, capsys):
    args = ["checkerboard", "--fixed", str(phantom_dir / "fixed.mha"), "--moving", str(phantom_dir / "moving.mha"),
            "--transform", str(phantom_dir / "ground_truth.json"), "--out", str(tmp_path / "cb.mha"),
            "--pgm", str(tmp_path / "cb.pgm")]
    assert main(args) == 0
    assert (tmp_path / "cb.pgm").read_bytes().startswith(b"P5")
    assert main(["checkerboard", "--fixed", str(phantom_dir / "fixed.mha"), "--moving", str(phantom_dir / "moving.mha")]) == 1
    capsys.readouterr()
    assert main(["resample", "--moving", str(phantom_dir / "moving.mha"), "--reference", str(phantom_dir / "fixed.mha"),
                 "--out", str(tmp_path / "r.mha"), "--scheme", "linear"]) == 0
    assert _json_out(capsys)["dims"] == [40, 40, 16]


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "voxalign", "--version"], capture_output=True, text=True)
    assert res.returncode == 0
    assert res.stdout.startswith("voxalign ")
    res = subprocess.run([sys.executable, "-m", "voxalign", "frobnicate"], capture_output=True, text=True)
    assert res.returncode == 1
