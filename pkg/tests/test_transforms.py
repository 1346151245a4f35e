import numpy as np
import pytest

from conftest import random_rotation
from voxalign.bspline import cubic_kernel
from voxalign.transforms import AffineTransform, BSplineTransform, CompositeTransform, compose, refine_grid


def _bspline(rng, cells=5, scale=1.0):
    b = BSplineTransform.covering([-10.0, -8.0, -4.0], [10.0, 8.0, 4.0], cells)
    return b.with_parameters(scale * rng.normal(size=b.n_parameters))


def _affine(rng):
    m = random_rotation(rng) @ np.diag(rng.uniform(0.9, 1.1, size=3))
    return AffineTransform(m, rng.normal(size=3), rng.normal(size=3))


def _points(rng, n=100, half=(9.5, 7.5, 3.5)):
    return rng.uniform(-1, 1, size=(n, 3)) * half


def test_identities(rng):
    p = rng.normal(size=3)
    np.testing.assert_array_equal(AffineTransform().apply(p), p)
    b = BSplineTransform.covering([-1, -1, -1], [1, 1, 1], 5)
    np.testing.assert_array_equal(b.apply(p * 0.1), p * 0.1)
    assert b.n_parameters == 3 * 8**3 == 1536


def test_affine_inverse_and_center(rng):
    t = _affine(rng)
    p = _points(rng)
    np.testing.assert_allclose(t.inverse().transform_points(t.transform_points(p)), p, atol=1e-12)
    moved = t.with_center(rng.normal(size=3))
    np.testing.assert_allclose(moved.transform_points(p), t.transform_points(p), atol=1e-12)
    h = t.homogeneous()
    np.testing.assert_allclose(p @ h[:3, :3].T + h[:3, 3], t.transform_points(p), atol=1e-12)


def test_single_control_point_matches_tensor_sum():
    b = BSplineTransform.covering([0.0, 0.0, 0.0], [10.0, 10.0, 10.0], 5)
    coeffs = np.zeros(b.coefficients.shape)
    node = (3, 2, 4)
    coeffs[(0,) + node] = 1.0
    b = b.with_parameters(coeffs.ravel())
    pos = b.domain_origin + (np.array(node) - 1) * b.grid_spacing
    d = b.displacement(pos[None, :])[0]
    assert d[0] == pytest.approx((4.0 / 6.0) ** 3, abs=1e-15)
    assert d[1] == d[2] == 0.0

    # brute force over every control point at a generic point
    rng = np.random.default_rng(3)
    full = b.with_parameters(rng.normal(size=b.n_parameters))
    p = np.array([3.3, 7.1, 0.4])
    u = (p - full.domain_origin) / full.grid_spacing
    total = np.zeros(3)
    for i in range(8):
        for j in range(8):
            for k in range(8):
                w = cubic_kernel(u[0] - (i - 1)) * cubic_kernel(u[1] - (j - 1)) * cubic_kernel(u[2] - (k - 1))
                total += w * full.coefficients[:, i, j, k]
    np.testing.assert_allclose(full.displacement(p[None, :])[0], total, atol=1e-12)


def test_outside_domain_not_displaced(rng):
    b = _bspline(rng)
    p = np.array([[50.0, 0.0, 0.0], [0.0, 0.0, -4.5]])
    np.testing.assert_array_equal(b.transform_points(p), p)


def test_affine_jacobian(rng):
    t = _affine(rng)
    p = rng.normal(size=3)
    jac = t.jacobian_wrt_parameters(p)
    np.testing.assert_array_equal(jac[:, 9:], np.eye(3))
    x0 = t.parameters
    h = 1e-6
    for k in range(12):
        e = np.zeros(12)
        e[k] = h
        fd = (t.with_parameters(x0 + e).apply(p) - t.with_parameters(x0 - e).apply(p)) / (2 * h)
        np.testing.assert_allclose(jac[:, k], fd, rtol=1e-6, atol=1e-9)


def test_bspline_jacobian(rng):
    b = _bspline(rng)
    p = np.array([1.3, -2.2, 0.7])
    jac = b.jacobian_wrt_parameters(p).toarray()
    assert np.count_nonzero(jac) <= 192
    x0 = b.parameters
    h = 1e-6
    for k in rng.choice(b.n_parameters, size=40, replace=False).tolist() + list(np.flatnonzero(jac[0])[:5]):
        e = np.zeros(b.n_parameters)
        e[k] = h
        fd = (b.with_parameters(x0 + e).apply(p) - b.with_parameters(x0 - e).apply(p)) / (2 * h)
        np.testing.assert_allclose(jac[:, k], fd, rtol=1e-6, atol=1e-9)


def test_composite_jacobian_and_pullback(rng):
    c = CompositeTransform(_affine(rng), _bspline(rng, scale=0.5))
    pts = _points(rng, 30)
    v = rng.normal(size=(30, 3))
    expected = sum(v[i] @ c.jacobian_wrt_parameters(pts[i]).toarray() for i in range(30))
    np.testing.assert_allclose(c.pullback(pts, v), expected, atol=1e-10)


def test_refine_zero():
    b = BSplineTransform.covering([0, 0, 0], [10, 10, 10], 5)
    r, err = refine_grid(b, 6)
    assert r.n_parameters == 3 * 9**3 == 2187
    assert err == 0.0
    assert not np.any(r.parameters)


def test_refine_linear_field_exact(rng):
    b = BSplineTransform.covering([-10.0, -8.0, -4.0], [10.0, 8.0, 4.0], 5)
    a = rng.normal(size=(3, 3)) * 0.05
    c0 = rng.normal(size=3)
    coeffs = (b.node_positions() @ a.T + c0).T
    b = b.with_parameters(coeffs.ravel())
    r, err = refine_grid(b, 6)
    assert err < 1e-8
    p = _points(rng)
    np.testing.assert_allclose(r.displacement(p), p @ a.T + c0, atol=1e-8)


def test_refine_by_doubling_is_exact(rng):
    b = _bspline(rng)
    r, err = refine_grid(b, 10)
    assert err < 1e-8
    p = _points(rng)
    np.testing.assert_allclose(r.displacement(p), b.displacement(p), atol=1e-8)


def test_compose_matches_sequential(rng):
    g, b = _affine(rng), _bspline(rng)
    p = _points(rng)
    c = compose(g, b)
    np.testing.assert_allclose(c.transform_points(p), g.transform_points(b.transform_points(p)), rtol=0, atol=1e-12)
    ident = compose(AffineTransform(), b)
    np.testing.assert_allclose(ident.transform_points(p), b.transform_points(p), atol=1e-12)
    zero = compose(AffineTransform(), b.zero_like())
    np.testing.assert_array_equal(zero.transform_points(p), p)
