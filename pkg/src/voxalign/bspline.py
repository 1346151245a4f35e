"""Uniform cubic B-spline basis helpers shared by interpolation, the FFD
transform and the Parzen kernel."""

import numpy as np


def cubic_weights(t):
    """Weights of the four uniform cubic B-spline pieces at fraction ``t``.

    ``t`` is the offset in [0, 1] from the second support node.  Returns an
    array of shape ``t.shape + (4,)`` whose last axis sums to one.
    """
    t = np.asarray(t, dtype=float)
    t2 = t * t
    t3 = t2 * t
    u = 1.0 - t
    return np.stack(
        [
            u * u * u / 6.0,
            (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
            (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
            t3 / 6.0,
        ],
        axis=-1,
    )


def cubic_weight_derivatives(t):
    t = np.asarray(t, dtype=float)
    t2 = t * t
    u = 1.0 - t
    return np.stack(
        [
            -0.5 * u * u,
            1.5 * t2 - 2.0 * t,
            -1.5 * t2 + t + 0.5,
            0.5 * t2,
        ],
        axis=-1,
    )


def cubic_kernel(x):
    """Centered cubic B-spline B3(x), support (-2, 2)."""
    a = np.abs(np.asarray(x, dtype=float))
    out = np.zeros_like(a)
    inner = a < 1.0
    outer = (a >= 1.0) & (a < 2.0)
    out[inner] = (4.0 - 6.0 * a[inner] ** 2 + 3.0 * a[inner] ** 3) / 6.0
    out[outer] = (2.0 - a[outer]) ** 3 / 6.0
    return out


def cubic_kernel_derivative(x):
    x = np.asarray(x, dtype=float)
    a = np.abs(x)
    s = np.sign(x)
    out = np.zeros_like(a)
    inner = a < 1.0
    outer = (a >= 1.0) & (a < 2.0)
    out[inner] = (-2.0 * a[inner] + 1.5 * a[inner] ** 2) * s[inner]
    out[outer] = -0.5 * (2.0 - a[outer]) ** 2 * s[outer]
    return out
