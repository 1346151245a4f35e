import numpy as np
import pytest

from conftest import make_volume
from voxalign import pyramid as pyr
from voxalign.errors import ValidationError


def test_unclamped_coarse_level_dims():
    assert pyr.level_dims((256, 256, 8), [(4, 4, 4), (1, 1, 1)], clamp=False)[0] == (64, 64, 2)


def test_clamped_schedule_dims():
    dims = pyr.level_dims((256, 256, 8), pyr.DEFAULT_SHRINK)
    assert dims == [(64, 64, 4), (128, 128, 4), (256, 256, 8)]


def test_built_levels_match_dims_and_spacing():
    v = make_volume(np.zeros((32, 32, 8)), spacing=(0.5, 0.5, 2.0))
    levels = pyr.build_pyramid(v)
    assert [lv.dims for lv in levels] == [(8, 8, 4), (16, 16, 4), (32, 32, 8)]
    np.testing.assert_allclose(levels[0].spacing, [2.0, 2.0, 4.0])
    # first voxel center is kept, so the origin does not move
    for lv in levels:
        np.testing.assert_array_equal(lv.origin, v.origin)


def test_shrink_one_is_identity(rng):
    v = make_volume(rng.normal(size=(9, 7, 5)))
    out = pyr.shrink_volume(v, (1, 1, 1))
    np.testing.assert_array_equal(out.data, v.data)


def test_impulse_response_is_sampled_gaussian():
    data = np.zeros((21, 21, 21))
    data[10, 10, 10] = 1.0
    out = pyr.smooth(data, (1.0, 1.0, 1.0))
    x = np.arange(-3, 4, dtype=float)
    k = np.exp(-0.5 * x**2)
    k /= k.sum()
    expected = np.einsum("i,j,k->ijk", k, k, k)
    np.testing.assert_allclose(out[7:14, 7:14, 7:14], expected, atol=1e-6)
    assert abs(out.sum() - 1.0) < 1e-12


def test_edge_renormalization_keeps_constants():
    out = pyr.smooth(np.full((6, 5, 4), 3.0), (2.0, 2.0, 2.0))
    np.testing.assert_allclose(out, 3.0, rtol=0, atol=1e-12)


def test_interior_mass_preserved(rng):
    data = np.zeros((40, 40, 12))
    data[8:32, 8:32, 4:8] = rng.uniform(0, 100, size=(24, 24, 4))
    out = pyr.smooth(data, (1.0, 1.0, 0.5))
    assert abs(out.mean() - data.mean()) < 1e-6


def test_thin_axis_is_not_shrunk():
    assert pyr.clamp_schedule((64, 64, 3), [(4, 4, 4)], min_dim=4) == [(4, 4, 1)]


@pytest.mark.parametrize("sched", [[], [(2, 2, 2)], [(0, 1, 1), (1, 1, 1)], [(2, 2), (1, 1, 1)]])
def test_invalid_schedules(sched):
    with pytest.raises(ValidationError):
        pyr.validate_schedule(sched)
