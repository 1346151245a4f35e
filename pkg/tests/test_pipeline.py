import json

import numpy as np
import pytest

from conftest import make_volume
from voxalign.errors import StageError, ValidationError
from voxalign.evaluation import compute_tre
from voxalign.pipeline import RegistrationConfig, fine_sample_count, register, sampling_mask
from voxalign.transforms import AffineTransform, CompositeTransform


@pytest.fixture(scope="module")
def small_result(small_phantom):
    return register(small_phantom.fixed, small_phantom.moving, RegistrationConfig(bspline_stage=False))


def test_fine_sample_count():
    # sqrt(524288 * 2187) = 33861.7
    assert fine_sample_count(256 * 256 * 8, 2187) == 33862
    assert fine_sample_count(100, 4) == 20


def test_config_rejects_unknown_keys():
    with pytest.raises(ValidationError, match="bogus"):
        RegistrationConfig.from_dict({"bogus": 1})


@pytest.mark.parametrize(
    "doc",
    [
        {"sample_fraction_global": 0.0},
        {"bins_local": 1},
        {"bspline_grid_levels": [6, 5]},
        {"init": "magic"},
        {"shrink_factors": [[2, 2, 2]]},
        {"bspline_sample_mask": "edges"},
    ],
)
def test_config_validation(doc):
    with pytest.raises(ValidationError):
        RegistrationConfig.from_dict(doc)


def test_config_json_round_trip(tmp_path):
    cfg = RegistrationConfig(seed=5, bins_global=64)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert RegistrationConfig.from_json(p) == cfg
    assert cfg.replace(seed=None).seed == 5


def test_affine_phantom_recovery(small_phantom, small_result):
    tre = compute_tre(small_phantom.landmarks, small_result.transform)
    assert tre.mean < 0.25
    assert small_result.init_mode == "pca"
    assert [s.stage for s in small_result.stages] == ["affine"] * 3
    assert isinstance(small_result.transform, AffineTransform)


def test_levels_do_not_get_worse(small_result):
    for rec in small_result.stages:
        assert rec.final_value <= rec.initial_value


def test_self_registration_stays_identity(small_phantom):
    f = small_phantom.fixed
    res = register(f, f, RegistrationConfig(bspline_stage=False, init="identity"))
    pts = f.voxel_world_coords()[::97]
    # within a tenth of a voxel everywhere on the grid
    assert np.max(np.abs(res.transform.transform_points(pts) - pts)) < 0.1


def test_full_pipeline_structure(small_phantom):
    cfg = RegistrationConfig(lbfgsb_max_iterations=5)
    res = register(small_phantom.fixed, small_phantom.moving, cfg)
    assert isinstance(res.transform, CompositeTransform)
    local = [s for s in res.stages if s.stage == "bspline"]
    assert [s.info["grid_cells"] for s in local] == [5, 6]
    assert res.transform.local_transform.n_parameters == 2187
    assert local[1].info["refine_rms_mm"] >= 0.0
    summary = res.summary()
    json.dumps(summary)
    assert set(summary["seconds"]) >= {"pyramid", "init", "affine", "bspline", "total"}


def test_centroid_init_seed(small_phantom):
    cfg = RegistrationConfig(bspline_stage=False, init="centroid", rsgd_max_iterations=1)
    res = register(small_phantom.fixed, small_phantom.moving, cfg)
    np.testing.assert_array_equal(res.initial_affine.matrix, np.eye(3))
    assert res.diagnostics["init"] == "centroid"


def test_pca_falls_back_on_constant_volume():
    data = np.zeros((16, 16, 8))
    data[4:12, 4:12, 2:6] = 100.0
    f = make_volume(data)
    m = make_volume(np.full((16, 16, 8), 5.0))
    cfg = RegistrationConfig(bspline_stage=False, rsgd_max_iterations=2)
    res = register(f, m, cfg)
    assert res.diagnostics["init"] == "centroid"
    assert "fallback" in res.diagnostics


def test_stage_error_wraps_cause(small_phantom):
    f = small_phantom.fixed
    far = make_volume(small_phantom.moving.data, origin=(1000.0, 0.0, 0.0))
    with pytest.raises(StageError) as info:
        register(f, far, RegistrationConfig(bspline_stage=False, init="identity"))
    assert info.value.stage == "affine"
    assert "TooFewSamples" in str(info.value) or "samples" in str(info.value)


def test_sampling_mask_covers_object(small_phantom):
    mask = sampling_mask(small_phantom.fixed, RegistrationConfig())
    body = small_phantom.body_mask.data > 0.5
    assert np.all(mask.data[body] == 1.0)
    assert mask.data.mean() < 1.0
    assert sampling_mask(small_phantom.fixed, RegistrationConfig(bspline_sample_mask="none")) is None
