"""Landmark TRE, checkerboard fusion and synthetic multimodal phantoms."""

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import GeometryMismatch, ValidationError
from .io_formats import LandmarkSet
from .transforms import AffineTransform, BSplineTransform, CompositeTransform
from .volume import Volume

# --------------------------------------------------------------------------
# TRE


@dataclass
class TreReport:
    errors: np.ndarray
    labels: list

    @property
    def count(self):
        return len(self.errors)

    @property
    def mean(self):
        return float(np.mean(self.errors))

    @property
    def median(self):
        return float(np.median(self.errors))

    @property
    def max(self):
        return float(np.max(self.errors))

    def to_dict(self):
        return {
            "count": self.count,
            "mean": self.mean,
            "median": self.median,
            "max": self.max,
            "errors": {label: float(e) for label, e in zip(self.labels, self.errors)},
        }

    def table(self):
        lines = [f"{'label':<12}{'error (mm)':>12}"]
        lines += [f"{label:<12}{e:>12.3f}" for label, e in zip(self.labels, self.errors)]
        lines.append(f"{'mean':<12}{self.mean:>12.3f}")
        lines.append(f"{'median':<12}{self.median:>12.3f}")
        lines.append(f"{'max':<12}{self.max:>12.3f}")
        return "\n".join(lines)


def compute_tre(landmarks, t):
    """Per-landmark ``|t(fixed) - moving|`` in mm (errors live in moving space)."""
    mapped = landmarks.fixed if t is None else t.transform_points(landmarks.fixed)
    errors = np.linalg.norm(mapped - landmarks.moving, axis=1)
    return TreReport(errors, list(landmarks.labels))


# --------------------------------------------------------------------------
# checkerboard


def _window(data):
    lo, hi = float(data.min()), float(data.max())
    if hi <= lo:
        return np.zeros_like(data)
    return (data - lo) * (255.0 / (hi - lo))


def checkerboard(fixed, resampled_moving, cells_per_axis=4):
    """Interleave blocks of two same-grid volumes; even block parity shows
    ``fixed``.  Each input is windowed to [0, 255] first."""
    if not fixed.same_geometry(resampled_moving):
        raise GeometryMismatch("checkerboard inputs must share geometry")
    cells = np.broadcast_to(np.asarray(cells_per_axis, dtype=int), (3,))
    if np.any(cells < 1):
        raise ValidationError("cells_per_axis must be >= 1")
    parity = np.zeros(fixed.dims, dtype=int)
    for axis in range(3):
        n = fixed.dims[axis]
        block = (np.arange(n) * cells[axis]) // n
        shape = [1, 1, 1]
        shape[axis] = n
        parity = parity + block.reshape(shape)
    out = np.where(parity % 2 == 0, _window(fixed.data), _window(resampled_moving.data))
    return fixed.with_data(out)


# --------------------------------------------------------------------------
# phantoms


@dataclass
class PhantomSpec:
    """Recipe for a synthetic fixed/moving pair with known ground truth.

    The ground truth maps fixed world points into moving space:
    ``affine(bspline(x))``.  ``rotation_deg`` are x/y/z Euler angles applied
    in that order about the fixed volume center.
    """

    dims: tuple = (64, 64, 16)
    spacing: tuple = (1.0, 1.0, 1.0)
    structure_seed: int = 0
    n_blobs: int = 24
    blob_sigma: tuple = (0.08, 0.2)
    rotation_deg: tuple = (0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)
    scale: tuple = (1.0, 1.0, 1.0)
    bspline_cells: int = 0
    bspline_max_displacement: float = 0.0
    bspline_seed: int = 1
    remap: str = "inverted_sqrt"
    remap_knee: float = 60.0
    blur_mm: float = 1.0
    noise: float = 0.0
    noise_seed: int = 2
    downsample: tuple = (1, 1, 1)
    body_semi_axes: tuple = (0.40, 0.30, 0.80)
    landmark_spread: float = 0.45
    min_feature_voxels: float = 1.0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.blob_sigma = tuple(float(b) for b in self.blob_sigma)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.downsample = tuple(int(d) for d in self.downsample)
        for name in ("rotation_deg", "translation", "scale", "body_semi_axes"):
            setattr(self, name, tuple(float(x) for x in getattr(self, name)))
        if np.ndim(self.blur_mm):
            self.blur_mm = tuple(float(x) for x in self.blur_mm)
        if min(self.spacing) <= 0:
            raise ValidationError("phantom spacing must be positive")
        if self.noise < 0 or np.any(np.asarray(self.blur_mm) < 0):
            raise ValidationError("noise and blur must be non-negative")
        if min(self.dims) < 1 or min(self.downsample) < 1:
            raise ValidationError("dims and downsample factors must be >= 1")
        if self.remap not in ("inverted_sqrt", "identity"):
            raise ValidationError(f"unknown remap {self.remap!r}")
        if self.min_feature_voxels < 0:
            raise ValidationError("min_feature_voxels must be >= 0")
        if not 0.0 < self.remap_knee < 250.0:
            raise ValidationError(f"remap_knee must lie in (0, 250), got {self.remap_knee}")

    @classmethod
    def from_dict(cls, doc):
        known = cls.__dataclass_fields__
        unknown = set(doc) - set(known)
        if unknown:
            raise ValidationError(f"unknown phantom spec keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class Phantom:
    fixed: Volume
    moving: Volume
    landmarks: LandmarkSet
    ground_truth: object
    body_mask: Volume = None
    info: dict = field(default_factory=dict)


def euler_matrix(degrees):
    ax, ay, az = np.radians(np.asarray(degrees, dtype=float))
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def _centered_volume(data, spacing):
    dims = np.array(data.shape)
    spacing = np.asarray(spacing, dtype=float)
    return Volume(data, spacing, -(dims - 1) * spacing / 2.0)


class _Anatomy:
    """Analytic body: a soft ellipsoid holding smooth Gaussian blobs.

    Blob widths and the rim width are floored at ``min_feature_voxels`` grid
    spacings per axis; thinner features alias between samples, and a local
    deformation can then gain MI from interpolation artifacts.
    """

    def __init__(self, spec, extent, grid_spacing):
        rng = np.random.default_rng(spec.structure_seed)
        self.semi = np.asarray(spec.body_semi_axes) * extent
        floor = spec.min_feature_voxels * np.asarray(grid_spacing, dtype=float)
        # rim half-width per axis in mm
        self.edge = np.maximum(0.04 * self.semi, floor)
        self.base = 100.0
        blobs = []
        for _ in range(spec.n_blobs):
            # centers inside 70% of the body, sizes a fraction of the semi-axes
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            center = direction * rng.uniform(0.0, 0.7) * self.semi
            sigma = np.maximum(rng.uniform(*spec.blob_sigma, size=3) * self.semi, floor)
            amp = rng.choice([-1.0, 1.0]) * rng.uniform(40.0, 80.0)
            blobs.append((center, sigma, amp))
        self.blobs = blobs
        self.tissue_floor = 10.0
        self.tissue_max = 250.0

    def envelope(self, x):
        u = x / self.semi
        r = np.sqrt(np.sum(u**2, axis=1))
        # rim width (in r units) along the local normal of the level set
        n = u / np.maximum(r, 1e-12)[:, None]
        width = np.sqrt(np.sum((n * self.edge / self.semi) ** 2, axis=1))
        return 0.5 * (1.0 + np.tanh((1.0 - r) / (2.0 * width)))

    def tissue(self, x):
        t = np.full(len(x), self.base)
        for center, sigma, amp in self.blobs:
            t += amp * np.exp(-0.5 * np.sum(((x - center) / sigma) ** 2, axis=1))
        return np.clip(t, self.tissue_floor, self.tissue_max)

    def fixed_intensity(self, x):
        return self.envelope(x) * self.tissue(x)

    def moving_intensity(self, x, remap, knee=60.0):
        f = self.fixed_intensity(x)
        if remap == "identity":
            return f
        return remap_intensity(f, knee, self.tissue_max)


def remap_intensity(f, knee=60.0, top=250.0):
    """Second-modality intensity as a function of the first.

    Values at or above ``knee`` are inverted through a square root, so bright
    becomes dark; below ``knee`` a linear ramp from 0 keeps the background
    dark.  A low knee makes the ramp steep, and a steep ramp lets a local
    deformation gain MI by reshaping the object rim.
    """
    f = np.asarray(f, dtype=float)

    def inverted(v):
        return 40.0 + 160.0 * (1.0 - np.sqrt(np.clip(v, knee, top) / top))

    return np.where(f < knee, np.clip(f, 0.0, None) / knee * inverted(knee), inverted(f))


def invert_bspline(b, points, iterations=200, tol=1e-10):
    """Solve ``x + d(x) = y`` for x by fixed-point iteration."""
    y = np.asarray(points, dtype=float)
    x = y.copy()
    for _ in range(iterations):
        nxt = y - b.displacement(x)
        delta = np.max(np.abs(nxt - x)) if len(x) else 0.0
        x = nxt
        if delta < tol:
            return x
    raise ValidationError("B-spline ground truth is not invertible by fixed-point iteration; reduce its displacement")


def random_bspline(lo, hi, cells, max_displacement, seed):
    b = BSplineTransform.covering(lo, hi, cells)
    rng = np.random.default_rng(seed)
    coeffs = rng.normal(size=b.coefficients.shape)
    coeffs = ndimage.gaussian_filter(coeffs, sigma=(0, 0.7, 0.7, 0.7))
    b = b.with_parameters(coeffs.ravel())
    probe = np.stack(np.meshgrid(*[np.linspace(lo[a], hi[a], 21) for a in range(3)], indexing="ij"), axis=-1).reshape(-1, 3)
    peak = np.max(np.linalg.norm(b.displacement(probe), axis=1))
    if peak > 0:
        b = b.with_parameters(coeffs.ravel() * (max_displacement / peak))
    return b


def generate_phantom(spec):
    """Build a fixed/moving pair, paired landmarks and the ground truth.

    ``moving(T(x))`` reproduces the modality-remapped ``fixed(x)`` before blur
    and noise, where ``T`` is the ground-truth fixed-to-moving transform.
    """
    spacing = np.asarray(spec.spacing)
    dims = np.asarray(spec.dims)
    extent = (dims - 1) * spacing
    ds = np.asarray(spec.downsample)
    anatomy = _Anatomy(spec, np.where(extent > 0, extent, spacing), spacing * ds)

    fixed = _centered_volume(np.zeros(tuple(dims)), spacing)
    fpts = fixed.voxel_world_coords()
    fixed = fixed.with_data(anatomy.fixed_intensity(fpts).reshape(fixed.dims, order="F"))
    body = fixed.with_data((anatomy.envelope(fpts) > 0.5).astype(float).reshape(fixed.dims, order="F"))

    affine = AffineTransform(euler_matrix(spec.rotation_deg) @ np.diag(spec.scale), spec.translation, np.zeros(3))
    mdims = -(-dims // ds)
    moving = _centered_volume(np.zeros(tuple(mdims)), spacing * ds)
    local = None
    if spec.bspline_cells > 0 and spec.bspline_max_displacement > 0:
        # the field drops to zero outside its domain; the domain covers the
        # fixed grid and the pre-image of the moving grid with a margin, so
        # that jump stays away from every point the inversion visits
        lo, hi = fixed.world_bounds()
        mlo, mhi = moving.world_bounds()
        corners = np.array([[a, b, c] for a in (mlo[0], mhi[0]) for b in (mlo[1], mhi[1]) for c in (mlo[2], mhi[2])])
        back = affine.inverse().transform_points(corners)
        lo = np.minimum(lo, back.min(axis=0))
        hi = np.maximum(hi, back.max(axis=0))
        pad = 2.0 * spec.bspline_max_displacement
        local = random_bspline(lo - pad, hi + pad, spec.bspline_cells, spec.bspline_max_displacement, spec.bspline_seed)
    truth = affine if local is None else CompositeTransform(affine, local)
    mpts = moving.voxel_world_coords()
    src = affine.inverse().transform_points(mpts)
    if local is not None:
        src = invert_bspline(local, src)
    mdata = anatomy.moving_intensity(src, spec.remap, spec.remap_knee).reshape(moving.dims, order="F")
    if np.any(np.asarray(spec.blur_mm) > 0):
        mdata = ndimage.gaussian_filter(mdata, sigma=np.asarray(spec.blur_mm, dtype=float) / moving.spacing, mode="nearest", truncate=3.0)
    if spec.noise > 0:
        rng = np.random.default_rng(spec.noise_seed)
        mdata = mdata + rng.normal(scale=spec.noise * float(np.max(mdata)), size=mdata.shape)
    moving = moving.with_data(mdata)

    offsets = np.array([-1.0, 0.0, 1.0])
    semi = anatomy.semi * spec.landmark_spread
    # keep landmarks at least one voxel inside the fixed grid
    semi = np.minimum(semi, np.maximum(extent / 2.0 - spacing, 0.0))
    grid = np.stack(np.meshgrid(offsets, offsets, offsets, indexing="ij"), axis=-1).reshape(-1, 3)
    fixed_lm = grid * semi
    labels = [f"L{i:02d}" for i in range(len(fixed_lm))]
    landmarks = LandmarkSet(fixed_lm, truth.transform_points(fixed_lm), labels)
    info = {"body_semi_axes": anatomy.semi.tolist()}
    return Phantom(fixed, moving, landmarks, truth, body, info)
