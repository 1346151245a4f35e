import numpy as np
import pytest

from voxalign.errors import NonFiniteObjective
from voxalign.optim import (
    BOUND_ACTIVE,
    GRADIENT_TOLERANCE,
    MAX_ITERATIONS,
    LBFGSBOptions,
    RSGDOptions,
    lbfgsb_minimize,
    rsgd_minimize,
)


def parabola(x):
    return float((x[0] - 3.0) ** 2), np.array([2.0 * (x[0] - 3.0)])


def quadratic(a, b):
    def f(x):
        return float(0.5 * x @ a @ x - b @ x), a @ x - b

    return f


def test_rsgd_parabola():
    x, trace = rsgd_minimize(parabola, [0.0], options=RSGDOptions(initial_step=1.0, min_step=1e-6))
    assert x[0] == pytest.approx(3.0, abs=1e-5)
    assert trace.best_value <= trace.values[0]
    # the step only shrinks on direction reversals
    steps = [r.step for r in trace.records]
    assert all(b <= a for a, b in zip(steps, steps[1:]))


def test_rsgd_stationary_start():
    x, trace = rsgd_minimize(parabola, [3.0])
    assert x[0] == 3.0
    assert trace.iterations == 0
    assert trace.stop_reason == GRADIENT_TOLERANCE


def test_rsgd_max_iterations():
    _, trace = rsgd_minimize(parabola, [0.0], options=RSGDOptions(initial_step=1e-3, max_iterations=5))
    assert trace.stop_reason == MAX_ITERATIONS
    assert trace.iterations == 5
    assert len(trace.log_lines()) == 5


def test_rsgd_scales_reduce_iterations():
    # badly scaled bowl: parameter 0 moves 100x more per unit than parameter 1
    w = np.array([1e4, 1.0])
    f = quadratic(np.diag(w), w * np.array([0.02, 2.0]))
    opts = RSGDOptions(initial_step=1.0, min_step=1e-4, max_iterations=2000)
    _, plain = rsgd_minimize(f, [0.0, 0.0], options=opts)
    x, scaled = rsgd_minimize(f, [0.0, 0.0], scales=np.sqrt(w), options=opts)
    np.testing.assert_allclose(x, [0.02, 2.0], atol=1e-3)
    assert scaled.iterations < plain.iterations


def test_rsgd_infeasible_trial_relaxes():
    def f(x):
        if x[0] > 2.0:
            return np.inf, np.zeros(1)
        return parabola(x)

    x, _ = rsgd_minimize(f, [0.0], options=RSGDOptions(initial_step=1.5, min_step=1e-6))
    assert x[0] <= 2.0
    assert x[0] == pytest.approx(2.0, abs=1e-3)


def test_rsgd_nan_raises():
    with pytest.raises(NonFiniteObjective):
        rsgd_minimize(lambda x: (np.nan, np.zeros(1)), [0.0])


def test_lbfgsb_50d_quadratic(rng):
    q = np.linalg.qr(rng.normal(size=(50, 50)))[0]
    a = q @ np.diag(np.linspace(1.0, 20.0, 50)) @ q.T
    b = rng.normal(size=50)
    opts = LBFGSBOptions(max_iterations=500, gradient_tolerance=1e-10, relative_tolerance=0.0)
    x, trace = lbfgsb_minimize(quadratic(a, b), np.zeros(50), options=opts)
    assert np.linalg.norm(a @ x - b) < 1e-6
    np.testing.assert_allclose(x, np.linalg.solve(a, b), atol=1e-6)
    assert trace.iterations > 0


def test_lbfgsb_clamped_solution():
    # separable bowl with minimizer (3, -2, 0.5); box cuts off the first two
    center = np.array([3.0, -2.0, 0.5])
    f = quadratic(np.eye(3), center)
    bounds = [(-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0)]
    x, trace = lbfgsb_minimize(f, np.zeros(3), bounds)
    np.testing.assert_allclose(x, [1.0, -1.0, 0.5], atol=1e-8)
    assert trace.stop_reason in (BOUND_ACTIVE, GRADIENT_TOLERANCE)


def test_lbfgsb_iterates_feasible(rng):
    seen = []
    center = rng.normal(size=6) * 5

    def f(x):
        seen.append(x.copy())
        return quadratic(np.eye(6), center)(x)

    lbfgsb_minimize(f, np.zeros(6), [(-1.0, 1.0)] * 6)
    assert np.all(np.abs(np.array(seen)) <= 1.0)


def test_lbfgsb_point_box():
    x, trace = lbfgsb_minimize(parabola, [0.5], [(0.5, 0.5)])
    assert x[0] == 0.5
    assert trace.stop_reason == BOUND_ACTIVE
    assert trace.evaluations == 0
