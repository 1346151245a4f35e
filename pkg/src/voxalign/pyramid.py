"""Gaussian multi-resolution pyramids."""

import logging
import math

import numpy as np
from scipy import ndimage

from .errors import DegenerateLevel, ValidationError

log = logging.getLogger(__name__)

DEFAULT_SHRINK = ((4, 4, 4), (2, 2, 2), (1, 1, 1))


def gaussian_kernel(sigma):
    """Sampled Gaussian truncated at radius ceil(3 sigma), normalized."""
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth(data, sigmas):
    """Separable Gaussian smoothing with kernel renormalization at the edges.

    ``sigmas`` are per-axis standard deviations in voxels; 0 skips an axis.
    """
    out = np.asarray(data, dtype=float)
    for axis, sigma in enumerate(sigmas):
        if sigma <= 0:
            continue
        k = gaussian_kernel(sigma)
        num = ndimage.correlate1d(out, k, axis=axis, mode="constant", cval=0.0)
        den = ndimage.correlate1d(np.ones(out.shape[axis]), k, mode="constant", cval=0.0)
        shape = [1, 1, 1]
        shape[axis] = -1
        out = num / den.reshape(shape)
    return out


def clamp_schedule(dims, shrink_factors, min_dim=4):
    """Reduce per-axis shrink factors so every level keeps ``min_dim`` voxels.

    An axis already thinner than ``min_dim`` is never shrunk.
    """
    clamped = []
    for level in shrink_factors:
        row = []
        for n, s in zip(dims, level):
            s = int(s)
            orig = s
            while s > 1 and math.ceil(n / s) < min_dim:
                s -= 1
            if s != orig:
                log.info("clamped shrink factor %d -> %d for axis of %d voxels", orig, s, n)
            row.append(s)
        clamped.append(tuple(row))
    return clamped


def validate_schedule(shrink_factors):
    sched = [tuple(int(s) for s in level) for level in shrink_factors]
    if not sched:
        raise ValidationError("pyramid schedule is empty")
    for level in sched:
        if len(level) != 3 or min(level) < 1:
            raise ValidationError(f"shrink factors must be three integers >= 1, got {level}")
    if sched[-1] != (1, 1, 1):
        raise ValidationError("the finest pyramid level must have shrink factors (1, 1, 1)")
    return sched


def shrink_volume(v, shrink):
    """Smooth with variance (s/2)^2 voxels per axis and keep every s-th voxel."""
    shrink = tuple(int(s) for s in shrink)
    if shrink == (1, 1, 1):
        return v
    dims = [math.ceil(n / s) for n, s in zip(v.dims, shrink)]
    if min(dims) < 1:
        raise DegenerateLevel(f"shrink {shrink} leaves no voxels in {v.dims}")
    sigmas = [s / 2.0 if s > 1 else 0.0 for s in shrink]
    smoothed = smooth(v.data, sigmas)
    sub = smoothed[:: shrink[0], :: shrink[1], :: shrink[2]]
    # sampling starts at voxel 0, so the origin voxel center stays put
    return type(v)(sub, v.spacing * np.array(shrink, dtype=float), v.origin, v.direction)


def build_pyramid(v, shrink_factors=DEFAULT_SHRINK, clamp=True, min_dim=4):
    """Return the pyramid levels of ``v``, coarsest first."""
    sched = validate_schedule(shrink_factors)
    if clamp:
        sched = clamp_schedule(v.dims, sched, min_dim)
    return [shrink_volume(v, level) for level in sched]


def level_dims(dims, shrink_factors, clamp=True, min_dim=4):
    sched = validate_schedule(shrink_factors)
    if clamp:
        sched = clamp_schedule(dims, sched, min_dim)
    return [tuple(math.ceil(n / s) for n, s in zip(dims, level)) for level in sched]
