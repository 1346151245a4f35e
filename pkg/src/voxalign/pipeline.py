"""Two-stage registration: EM/PCA seed, multi-resolution affine MI with
regular-step gradient descent, then B-spline MI with bounded L-BFGS on a
two-level control grid."""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import ndimage

from . import pyramid as pyr
from .em_cluster import classify_foreground, fit_em
from .errors import DegenerateInput, DegeneratePointCloud, StageError, TooFewSamples, ValidationError, VoxalignError
from .io_formats import TransformRecord
from .mi_metric import MattesMutualInformation, draw_samples, intensity_range, sample_count
from .optim import LBFGSBOptions, RSGDOptions, lbfgsb_minimize, rsgd_minimize
from .pca_init import compute_pca_frame, initial_alignment, registration_seed
from .transforms import AffineTransform, BSplineTransform, CompositeTransform, refine_grid

log = logging.getLogger(__name__)

INIT_MODES = ("pca", "centroid", "identity")
SAMPLE_MASKS = ("foreground", "none")


@dataclass
class RegistrationConfig:
    shrink_factors: list = field(default_factory=lambda: [list(s) for s in pyr.DEFAULT_SHRINK])
    clamp_min_dim: int = 4
    bins_global: int = 100
    bins_local: int = 50
    sample_fraction_global: float = 0.09
    min_samples: int = 1000  # per-level floor, capped at the voxel count
    bspline_grid_levels: list = field(default_factory=lambda: [5, 6])
    sample_fraction_bspline_coarse: float = 0.07
    bspline_fine_samples: int = None  # None: round(sqrt(voxels * parameters))
    bspline_stage: bool = True
    interpolation: str = "cubic"
    init: str = "pca"
    seed: int = 0
    rsgd_initial_step: float = 2.0
    rsgd_min_step: float = 1e-3
    rsgd_relaxation: float = 0.5
    rsgd_max_iterations: int = 200
    translation_scale: float = None  # None: 1.0 (mm per mm)
    lbfgsb_memory: int = 10
    lbfgsb_max_iterations: int = 100
    lbfgsb_gradient_tolerance: float = 1e-9
    lbfgsb_relative_tolerance: float = 1e-10
    bspline_bound_cells: float = 1.0
    bspline_sample_mask: str = "foreground"
    bspline_mask_margin_mm: float = 2.0
    em_max_iterations: int = 200
    em_tolerance: float = 1e-10
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("sample_fraction_global", "sample_fraction_bspline_coarse"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValidationError(f"{name} must be in (0, 1], got {v}")
        if self.min_samples < 1:
            raise ValidationError(f"min_samples must be >= 1, got {self.min_samples}")
        if self.bins_global < 2 or self.bins_local < 2:
            raise ValidationError("bins must be >= 2")
        levels = list(self.bspline_grid_levels)
        if not levels or min(levels) < 1 or any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValidationError(f"bspline_grid_levels must be strictly increasing positive integers, got {levels}")
        if self.init not in INIT_MODES:
            raise ValidationError(f"init must be one of {INIT_MODES}, got {self.init!r}")
        if self.bspline_sample_mask not in SAMPLE_MASKS:
            raise ValidationError(f"bspline_sample_mask must be one of {SAMPLE_MASKS}, got {self.bspline_sample_mask!r}")
        if self.bspline_mask_margin_mm < 0:
            raise ValidationError("bspline_mask_margin_mm must be >= 0")
        pyr.validate_schedule(self.shrink_factors)

    @classmethod
    def from_dict(cls, doc):
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)

    def replace(self, **changes):
        doc = self.to_dict()
        doc.update({k: v for k, v in changes.items() if v is not None})
        return RegistrationConfig.from_dict(doc)

    def rsgd_options(self):
        return RSGDOptions(self.rsgd_initial_step, self.rsgd_min_step, self.rsgd_relaxation, self.rsgd_max_iterations)

    def lbfgsb_options(self):
        return LBFGSBOptions(self.lbfgsb_memory, self.lbfgsb_max_iterations, self.lbfgsb_gradient_tolerance, self.lbfgsb_relative_tolerance)


@dataclass
class StageRecord:
    stage: str
    level: int
    trace: object
    initial_value: float
    final_value: float
    samples: int
    seconds: float
    info: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "stage": self.stage,
            "level": self.level,
            "iterations": self.trace.iterations,
            "stop_reason": self.trace.stop_reason,
            "initial_value": self.initial_value,
            "final_value": self.final_value,
            "samples": self.samples,
            "seconds": self.seconds,
            **self.info,
        }


@dataclass
class RegistrationResult:
    transform: object
    affine: AffineTransform
    initial_affine: AffineTransform
    stages: list
    init_mode: str
    diagnostics: dict
    seconds: dict

    @property
    def final_value(self):
        return self.stages[-1].final_value if self.stages else None

    def record(self):
        """TransformRecord of the final transform (deterministic content only)."""
        meta = {
            "init": self.init_mode,
            "stages": ",".join(f"{s.stage}{s.level}" for s in self.stages),
            "iterations": ",".join(str(s.trace.iterations) for s in self.stages),
            "final_metric": repr(self.final_value),
        }
        return TransformRecord.from_transform(self.transform, meta)

    def summary(self):
        return {
            "init": self.init_mode,
            "diagnostics": self.diagnostics,
            "stages": [s.to_dict() for s in self.stages],
            "seconds": self.seconds,
        }


# --------------------------------------------------------------------------
# initialization


def intensity_centroid(v):
    w = np.clip(v.flat_values(), 0.0, None)
    total = w.sum()
    pts = v.voxel_world_coords()
    if total <= 0:
        return pts.mean(axis=0)
    return (w[:, None] * pts).sum(axis=0) / total


def fixed_center(v):
    lo, hi = v.world_bounds()
    return (lo + hi) / 2.0


def initialize(fixed_coarse, moving_coarse, cfg, fixed_full=None, moving_full=None):
    """Seed affine (fixed to moving) and diagnostics for ``cfg.init``.

    Falls back pca -> centroid -> identity when the point cloud is degenerate.
    """
    fixed_full = fixed_full or fixed_coarse
    moving_full = moving_full or moving_coarse
    diagnostics = {"requested_init": cfg.init}
    mode = cfg.init
    if mode == "pca":
        try:
            gf = fit_em(fixed_coarse, cfg.em_max_iterations, cfg.em_tolerance)
            gm = fit_em(moving_coarse, cfg.em_max_iterations, cfg.em_tolerance)
            ff = compute_pca_frame(fixed_coarse, classify_foreground(fixed_coarse, gf))
            fm = compute_pca_frame(moving_coarse, classify_foreground(moving_coarse, gm))
            align = initial_alignment(ff, fm)
            seed = registration_seed(align, ff.centroid)
            diagnostics.update(align.diagnostics())
            diagnostics["fixed_foreground_points"] = ff.point_count
            diagnostics["moving_foreground_points"] = fm.point_count
            diagnostics["init"] = "pca"
            return seed, diagnostics
        except (DegeneratePointCloud, DegenerateInput) as exc:
            log.warning("PCA initialization failed (%s); falling back to centroid", exc)
            diagnostics["fallback"] = str(exc)
            mode = "centroid"
    if mode == "centroid":
        cf = intensity_centroid(fixed_full)
        cm = intensity_centroid(moving_full)
        diagnostics.update({"init": "centroid", "d": float(np.linalg.norm(cm - cf))})
        return AffineTransform(np.eye(3), cm - cf, cf), diagnostics
    diagnostics["init"] = "identity"
    return AffineTransform(center=fixed_center(fixed_full)), diagnostics


# --------------------------------------------------------------------------
# stages


def affine_scales(points, center, cfg=None):
    """Millimetres of displacement per unit of each affine parameter.

    Matrix entry (r, k) moves a point by ``(x - center)_k``; its scale is the
    RMS of that lever arm over ``points``.  Translations are already in mm.
    """
    lever = np.sqrt(np.mean((np.asarray(points) - center) ** 2, axis=0))
    lever = np.maximum(lever, 1e-3)
    tscale = 1.0 if cfg is None or cfg.translation_scale is None else cfg.translation_scale
    return np.concatenate([np.tile(lever, 3), np.full(3, tscale)])


def _run_stage(stage, level, fn):
    try:
        return fn()
    except VoxalignError as exc:
        if isinstance(exc, StageError):
            raise
        raise StageError(stage, level, exc) from exc


def affine_stage(fixed_pyr, moving_pyr, seed, cfg, ranges=None):
    """Multi-resolution affine registration, coarse to fine.

    Each level draws its own fixed sample set and starts from the previous
    level's parameters unchanged (transforms live in world units).
    """
    ranges = ranges or (intensity_range(fixed_pyr[-1]), intensity_range(moving_pyr[-1]))
    current = seed
    records = []
    n_levels = len(fixed_pyr)
    for k, (f, m) in enumerate(zip(fixed_pyr, moving_pyr)):
        level = n_levels - 1 - k

        def run():
            t0 = time.perf_counter()
            count = sample_count(f.n_voxels, cfg.sample_fraction_global)
            count = min(f.n_voxels, max(count, cfg.min_samples))
            samples = draw_samples(f, count=count, seed=cfg.seed + 101 * (k + 1))
            metric = MattesMutualInformation(f, m, samples, current, cfg.bins_global, ranges[0], ranges[1],
                                             cfg.interpolation, threads=cfg.threads)
            objective = _guarded(metric)
            v0 = metric.evaluate(gradient=False).value
            scales = affine_scales(samples.points, current.center, cfg)
            x, trace = rsgd_minimize(objective, current.parameters, scales, cfg.rsgd_options())
            v1 = metric.evaluate(x, gradient=False).value
            return current.with_parameters(x), StageRecord("affine", level, trace, v0, v1, samples.count, time.perf_counter() - t0)

        current, rec = _run_stage("affine", level, run)
        log.info("affine level %d: %d iterations, -MI %.5f -> %.5f", level, rec.trace.iterations, rec.initial_value, rec.final_value)
        records.append(rec)
    return current, records


def _guarded(metric):
    # a trial point that loses the overlap is infeasible, not fatal
    def objective(params):
        try:
            return metric(params)
        except TooFewSamples:
            return math.inf, np.zeros_like(params)

    return objective


def bspline_bounds(b, coarse_spacing, cells=1.0):
    limit = np.repeat(np.asarray(coarse_spacing) * cells, b.n_control_points)
    return np.stack([-limit, limit], axis=1)


def fine_sample_count(n_voxels, n_parameters):
    return int(round(math.sqrt(n_voxels * n_parameters)))


def sampling_mask(fixed, cfg):
    """Dilated EM foreground of ``fixed`` for the local stage, or None.

    Background samples near the slab faces can be pushed out of the moving
    volume by a local deformation; dropping them raises MI without improving
    the alignment.  Restricting the draw to the object and a margin around
    it removes that incentive.
    """
    if cfg.bspline_sample_mask == "none":
        return None
    try:
        gmm = fit_em(fixed, cfg.em_max_iterations, cfg.em_tolerance)
    except DegenerateInput as exc:
        log.warning("no foreground mask for the B-spline stage (%s); sampling uniformly", exc)
        return None
    mask = classify_foreground(fixed, gmm).data > 0.5
    radius = np.floor(cfg.bspline_mask_margin_mm / fixed.spacing).astype(int)
    if np.any(radius > 0):
        r = np.maximum(radius, 1)
        grid = np.ogrid[tuple(slice(-k, k + 1) for k in radius)]
        ball = sum((g / rk) ** 2 for g, rk in zip(grid, r)) <= 1.0
        mask = ndimage.binary_dilation(mask, structure=ball)
    if not mask.any():
        return None
    return fixed.with_data(mask.astype(float))


def bspline_stage(fixed, moving, global_transform, cfg, ranges=None):
    """Local registration at full resolution with the affine frozen."""
    ranges = ranges or (intensity_range(fixed), intensity_range(moving))
    mask = sampling_mask(fixed, cfg)
    lo, hi = fixed.world_bounds()
    levels = list(cfg.bspline_grid_levels)
    local = BSplineTransform.covering(lo, hi, levels[0])
    coarse_spacing = local.grid_spacing.copy()
    records = []
    for k, cells in enumerate(levels):
        info = {"grid_cells": int(cells)}
        if k > 0:
            local, err = refine_grid(local, cells)
            info["refine_rms_mm"] = err
        if k == 0:
            count = sample_count(fixed.n_voxels, cfg.sample_fraction_bspline_coarse)
            count = min(fixed.n_voxels, max(count, cfg.min_samples))
        elif cfg.bspline_fine_samples is not None:
            count = int(cfg.bspline_fine_samples)
        else:
            count = min(fixed.n_voxels, fine_sample_count(fixed.n_voxels, local.n_parameters))
        template = CompositeTransform(global_transform, local)
        bounds = bspline_bounds(local, coarse_spacing, cfg.bspline_bound_cells)

        def run():
            t0 = time.perf_counter()
            samples = draw_samples(fixed, count=count, seed=cfg.seed + 7919 * (k + 1), mask=mask)
            metric = MattesMutualInformation(fixed, moving, samples, template, cfg.bins_local, ranges[0], ranges[1],
                                             cfg.interpolation, threads=cfg.threads)
            v0 = metric.evaluate(gradient=False).value
            x, trace = lbfgsb_minimize(metric, local.parameters, bounds, cfg.lbfgsb_options())
            v1 = metric.evaluate(x, gradient=False).value
            return local.with_parameters(x), StageRecord("bspline", k, trace, v0, v1, samples.count, time.perf_counter() - t0, info)

        local, rec = _run_stage("bspline", k, run)
        log.info("bspline level %d (%d cells): %d iterations, -MI %.5f -> %.5f", k, cells, rec.trace.iterations, rec.initial_value, rec.final_value)
        records.append(rec)
    return local, records


def register(fixed, moving, cfg=None):
    """Register ``moving`` onto ``fixed``; the result maps fixed to moving."""
    cfg = cfg or RegistrationConfig()
    t_start = time.perf_counter()
    seconds = {}
    fixed_pyr = pyr.build_pyramid(fixed, cfg.shrink_factors, min_dim=cfg.clamp_min_dim)
    moving_pyr = pyr.build_pyramid(moving, cfg.shrink_factors, min_dim=cfg.clamp_min_dim)
    seconds["pyramid"] = time.perf_counter() - t_start

    t0 = time.perf_counter()
    seed, diagnostics = _run_stage("init", 0, lambda: initialize(fixed_pyr[0], moving_pyr[0], cfg, fixed, moving))
    seconds["init"] = time.perf_counter() - t0

    ranges = (intensity_range(fixed), intensity_range(moving))
    t0 = time.perf_counter()
    affine, stages = affine_stage(fixed_pyr, moving_pyr, seed, cfg, ranges)
    seconds["affine"] = time.perf_counter() - t0

    final = affine
    if cfg.bspline_stage:
        t0 = time.perf_counter()
        local, local_records = bspline_stage(fixed, moving, affine, cfg, ranges)
        stages += local_records
        final = CompositeTransform(affine, local)
        seconds["bspline"] = time.perf_counter() - t0
    seconds["total"] = time.perf_counter() - t_start
    return RegistrationResult(final, affine, seed, stages, diagnostics.get("init", cfg.init), diagnostics, seconds)
