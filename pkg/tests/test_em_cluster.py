import numpy as np
import pytest

from conftest import make_volume
from voxalign.em_cluster import classify_foreground, fit_em
from voxalign.errors import DegenerateInput


def _mixture(rng, n=100_000):
    low = rng.normal(10.0, 1.0, size=int(0.7 * n))
    high = rng.normal(100.0, 5.0, size=n - len(low))
    values = np.concatenate([low, high])
    rng.shuffle(values)
    return make_volume(values.reshape(100, 100, -1))


def test_recovers_two_gaussians(rng):
    gmm = fit_em(_mixture(rng))
    np.testing.assert_allclose(gmm.means, [10.0, 100.0], atol=0.5)
    np.testing.assert_allclose(gmm.weights, [0.7, 0.3], atol=0.02)
    np.testing.assert_allclose(np.sqrt(gmm.variances), [1.0, 5.0], rtol=0.05)
    assert gmm.converged


def test_log_likelihood_monotone(rng):
    gmm = fit_em(_mixture(rng))
    ll = np.array(gmm.log_likelihoods)
    assert len(ll) >= 2
    assert np.all(np.diff(ll) >= -1e-9 * np.abs(ll[:-1]))


def test_two_constants():
    data = np.zeros((10, 10, 10))
    data[:, :, 6:] = 50.0
    v = make_volume(data)
    gmm = fit_em(v)
    np.testing.assert_allclose(gmm.means, [0.0, 50.0], atol=1e-6)
    np.testing.assert_allclose(gmm.weights, [0.6, 0.4], atol=1e-6)
    mask = classify_foreground(v, gmm)
    np.testing.assert_array_equal(mask.data, (data > 0).astype(float))


def test_constant_volume_is_degenerate():
    with pytest.raises(DegenerateInput):
        fit_em(make_volume(np.full((4, 4, 4), 7.0)))


def test_classify_examples():
    data = np.array([0.0, 1.0, 2.0, 98.0, 99.0, 100.0] * 2).reshape(3, 2, 2)
    v = make_volume(data)
    mask = classify_foreground(v, fit_em(v))
    np.testing.assert_array_equal(mask.data, (data > 50).astype(float))


def test_classification_invariant_under_increasing_affine_remap(rng):
    v = _mixture(rng, 20_000)
    w = v.with_data(3.0 * v.data + 40.0)
    a = classify_foreground(v, fit_em(v)).data
    b = classify_foreground(w, fit_em(w)).data
    assert np.mean(a != b) < 1e-4
