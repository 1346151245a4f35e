"""Mattes mutual information with Parzen-window joint histograms.

A fixed set of spatial samples is drawn once per stage.  Each sample
contributes to the joint histogram through a zero-order (box) kernel on the
fixed-intensity axis and a cubic B-spline kernel on the moving-intensity
axis, which makes the metric differentiable in the transform parameters.
The reported value is ``-MI`` so that optimizers minimize it.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .bspline import cubic_kernel, cubic_kernel_derivative
from .errors import TooFewSamples, ValidationError
from .volume import CUBIC, Interpolator

CHUNK_SIZE = 16384
RANGE_PADDING = 0.01
SPLINE_PAD_BINS = 2


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Fixed-space sample positions (voxel centers) with their intensities."""

    points: np.ndarray
    values: np.ndarray
    voxel_indices: np.ndarray
    seed: int

    @property
    def count(self):
        return len(self.values)


def sample_count(n_voxels, fraction=None, count=None):
    if count is not None:
        count = int(count)
        if not 1 <= count <= n_voxels:
            raise ValidationError(f"sample count must be in [1, {n_voxels}], got {count}")
        return count
    if fraction is None or not 0.0 < fraction <= 1.0:
        raise ValidationError(f"sample fraction must be in (0, 1], got {fraction}")
    return max(1, int(np.floor(fraction * n_voxels)))


def draw_samples(fixed, fraction=None, count=None, seed=0, mask=None):
    """Uniformly draw voxel centers of ``fixed`` without replacement.

    Exactly one of ``fraction`` (of the voxel count, floored) or ``count``
    should be given.  With ``mask`` (a same-grid volume, nonzero = eligible)
    the draw is restricted to masked voxels; the requested number is capped
    at the mask size.  The draw is a pure function of ``seed``.
    """
    n = sample_count(fixed.n_voxels, fraction, count)
    rng = np.random.default_rng(seed)
    if mask is None:
        pool = None
        size = fixed.n_voxels
    else:
        if mask.dims != fixed.dims:
            raise ValidationError(f"sampling mask dims {mask.dims} differ from volume dims {fixed.dims}")
        pool = np.flatnonzero(mask.flat_values() > 0.5)
        size = len(pool)
        if size == 0:
            raise ValidationError("sampling mask is empty")
        n = min(n, size)
    if n == size:
        flat = np.arange(size)
    else:
        flat = np.sort(rng.choice(size, size=n, replace=False))
    if pool is not None:
        flat = pool[flat]
    nx, ny, _ = fixed.dims
    idx = np.stack([flat % nx, (flat // nx) % ny, flat // (nx * ny)], axis=1).astype(float)
    values = fixed.flat_values()[flat]
    return SampleSet(fixed.index_to_world(idx), values, flat, seed)


def intensity_range(v, padding=RANGE_PADDING):
    lo, hi = float(v.data.min()), float(v.data.max())
    span = hi - lo
    if span <= 0:
        span = max(abs(lo), 1.0)
    return lo - padding * span, hi + padding * span


@dataclass
class JointHistogram:
    bins: int
    fixed_range: tuple
    moving_range: tuple
    joint: np.ndarray
    marginal_fixed: np.ndarray
    marginal_moving: np.ndarray


@dataclass
class MetricValue:
    value: float
    entropy_fixed: float
    entropy_moving: float
    joint_entropy: float
    gradient: np.ndarray
    samples_used: int
    histogram: JointHistogram = None

    @property
    def mutual_information(self):
        return -self.value

    def to_dict(self):
        return {
            "value": self.value,
            "mutual_information": -self.value,
            "entropy_fixed": self.entropy_fixed,
            "entropy_moving": self.entropy_moving,
            "joint_entropy": self.joint_entropy,
            "samples_used": self.samples_used,
        }


def entropy(p):
    """Shannon entropy (nats) with 0 log 0 = 0."""
    p = np.asarray(p, dtype=float).ravel()
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


class _BoxBinner:
    """Half-open bins ``[e_k, e_k+1)`` between explicit edges; a value on an
    edge goes to the upper bin regardless of division round-off."""

    def __init__(self, lo, hi, bins):
        self.lo = lo
        self.width = (hi - lo) / bins
        self.bins = bins
        self.edges = np.linspace(lo, hi, bins + 1)

    def index(self, v):
        idx = np.searchsorted(self.edges, v, side="right") - 1
        return np.clip(idx, 0, self.bins - 1).astype(np.int64)


class _SplineBinner:
    """Cubic B-spline Parzen window; two padding bins keep all mass inside."""

    def __init__(self, lo, hi, bins):
        if bins < 2 * SPLINE_PAD_BINS + 1:
            raise ValidationError(f"the B-spline Parzen kernel needs at least {2 * SPLINE_PAD_BINS + 1} bins, got {bins}")
        self.lo = lo
        self.width = (hi - lo) / (bins - 2 * SPLINE_PAD_BINS)
        self.bins = bins

    def position(self, v):
        u = (v - self.lo) / self.width + SPLINE_PAD_BINS
        clipped = (u < SPLINE_PAD_BINS) | (u > self.bins - SPLINE_PAD_BINS)
        return np.clip(u, SPLINE_PAD_BINS, self.bins - SPLINE_PAD_BINS), clipped

    def support(self, u):
        base = np.minimum(np.floor(u).astype(np.int64), self.bins - 3)
        j = base[:, None] + np.arange(-1, 3)
        return j, j - u[:, None]


class MattesMutualInformation:
    """Metric bound to one (fixed, moving, sample set, transform family).

    Parameters
    ----------
    fixed, moving : Volume
    samples : SampleSet
        Drawn from ``fixed``; kept for the lifetime of the metric.
    transform : transform object
        Template whose parameterization is optimised; ``evaluate(params)``
        uses ``transform.with_parameters(params)``.
    bins : int
        Histogram bins per axis.
    fixed_range, moving_range : (float, float), optional
        Intensity windows; default to the volume extrema padded by 1%.
    moving_kernel : {"bspline", "box"}
        Parzen kernel on the moving axis.  ``"box"`` gives a plain joint
        histogram (no gradient).
    threads : int
        Worker threads for chunked evaluation.  Chunking is fixed, so the
        result does not depend on the thread count.
    """

    def __init__(self, fixed, moving, samples, transform, bins=50, fixed_range=None, moving_range=None,
                 scheme=CUBIC, moving_kernel="bspline", threads=1, min_fraction=0.25):
        if bins < 2:
            raise ValidationError(f"bins must be >= 2, got {bins}")
        if moving_kernel not in ("bspline", "box"):
            raise ValidationError(f"unknown moving kernel {moving_kernel!r}")
        self.fixed = fixed
        self.moving = moving
        self.samples = samples
        self.transform = transform
        self.bins = int(bins)
        self.fixed_range = tuple(fixed_range) if fixed_range is not None else intensity_range(fixed)
        self.moving_range = tuple(moving_range) if moving_range is not None else intensity_range(moving)
        self.moving_kernel = moving_kernel
        self.threads = max(1, int(threads))
        self.min_fraction = min_fraction
        self.interpolator = Interpolator(moving, scheme)
        self._fixed_binner = _BoxBinner(*self.fixed_range, self.bins)
        if moving_kernel == "bspline":
            self._moving_binner = _SplineBinner(*self.moving_range, self.bins)
        else:
            self._moving_binner = _BoxBinner(*self.moving_range, self.bins)
        self._fixed_bins = self._fixed_binner.index(samples.values)
        n = samples.count
        self._chunks = [slice(s, min(s + CHUNK_SIZE, n)) for s in range(0, n, CHUNK_SIZE)]
        self._caches = [transform.precompute(samples.points[c]) for c in self._chunks]
        self.n_evaluations = 0

    # -- internals ----------------------------------------------------------

    def _map(self, t, k, gradient):
        sl = self._chunks[k]
        mapped = t.transform_points(self.samples.points[sl], self._caches[k])
        idx = self.moving.world_to_index(mapped)
        if gradient:
            vals, g_idx, valid = self.interpolator.sample_index(idx, gradient=True)
            g_world = g_idx @ self.moving.world_to_index_matrix
        else:
            vals, valid = self.interpolator.sample_index(idx)
            g_world = None
        fb = self._fixed_bins[sl]
        nb = self.bins
        if self.moving_kernel == "bspline":
            u, clipped = self._moving_binner.position(vals)
            j, d = self._moving_binner.support(u)
            w = cubic_kernel(d) * valid[:, None]
            flat = fb[:, None] * nb + j
            hist = np.bincount(flat.ravel(), weights=w.ravel(), minlength=nb * nb)
            extra = (j, d, clipped)
        else:
            j = self._moving_binner.index(vals)
            flat = fb * nb + j
            hist = np.bincount(flat, weights=valid.astype(float), minlength=nb * nb)
            extra = None
        return hist, int(valid.sum()), valid, g_world, extra

    def _chunk_gradient(self, t, k, state, log_ratio, scale):
        _, _, valid, g_world, (j, d, clipped) = state
        sl = self._chunks[k]
        fb = self._fixed_bins[sl]
        # d(-MI)/du_s = sum_j B3'(j - u_s) * log(p_ij / p_j)
        coef = np.sum(cubic_kernel_derivative(d) * log_ratio[fb[:, None], j], axis=1)
        coef = np.where(valid & ~clipped, coef, 0.0) * scale
        v = coef[:, None] * g_world
        return t.pullback(self.samples.points[sl], v, self._caches[k])

    def _run(self, fn, items):
        if self.threads == 1 or len(items) == 1:
            return [fn(i) for i in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, items))

    # -- public -------------------------------------------------------------

    def evaluate(self, params=None, gradient=True):
        """Metric value (and analytic gradient) at ``params``."""
        t = self.transform if params is None else self.transform.with_parameters(params)
        gradient = gradient and self.moving_kernel == "bspline"
        self.n_evaluations += 1
        states = self._run(lambda k: self._map(t, k, gradient), range(len(self._chunks)))
        nb = self.bins
        hist = np.zeros(nb * nb)
        used = 0
        for s in states:
            hist += s[0]
            used += s[1]
        count = self.samples.count
        if used == 0 or used < self.min_fraction * count:
            raise TooFewSamples(used, count)
        joint = (hist / used).reshape(nb, nb)
        pf = joint.sum(axis=1)
        pm = joint.sum(axis=0)
        hf, hm, hj = entropy(pf), entropy(pm), entropy(joint)
        value = -(hf + hm - hj)
        grad = None
        if gradient:
            with np.errstate(divide="ignore", invalid="ignore"):
                log_ratio = np.where(joint > 0, np.log(joint) - np.log(pm)[None, :], 0.0)
            scale = 1.0 / (used * self._moving_binner.width)
            parts = self._run(lambda k: self._chunk_gradient(t, k, states[k], log_ratio, scale), range(len(self._chunks)))
            grad = np.zeros(t.n_parameters)
            for g in parts:
                grad += g
        histogram = JointHistogram(nb, self.fixed_range, self.moving_range, joint, pf, pm)
        return MetricValue(value, hf, hm, hj, grad, used, histogram)

    def __call__(self, params):
        m = self.evaluate(params, gradient=True)
        return m.value, m.gradient


def evaluate(fixed, moving, t, samples, bins, **kwargs):
    """One-shot evaluation of ``-MI`` and its gradient for transform ``t``."""
    return MattesMutualInformation(fixed, moving, samples, t, bins, **kwargs).evaluate()
