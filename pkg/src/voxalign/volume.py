"""Scalar 3-D volumes with world geometry, interpolation and resampling.

Voxel data are stored as a float64 array indexed ``data[x, y, z]``.  The
index to world map is ``origin + direction @ (spacing * index)``; a voxel
index refers to the voxel center.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage

from .bspline import cubic_weight_derivatives, cubic_weights
from .errors import OutOfBoundsError, ValidationError

LINEAR = "linear"
CUBIC = "cubic-bspline"
SCHEMES = (LINEAR, CUBIC)

# boundary influence of the prefilter decays as 0.268**k; 24 voxels push it
# below 1e-13 of the signal
SPLINE_PAD = 24
# a voxel covers +-0.5 index units around its center
_HALF_VOXEL = 0.5
_SNAP_TOL = 1e-10


def _normalize_scheme(scheme):
    if scheme in ("cubic", "bspline", CUBIC):
        return CUBIC
    if scheme == LINEAR:
        return LINEAR
    raise ValidationError(f"unknown interpolation scheme {scheme!r}")


@dataclass(frozen=True, eq=False)
class Volume:
    """Immutable 3-D scalar image on a regular grid.

    Parameters
    ----------
    data : array_like, shape (nx, ny, nz)
        Intensities, converted to float64.
    spacing : array_like, shape (3,)
        Voxel size in millimetres, all components > 0.
    origin : array_like, shape (3,)
        World position of voxel (0, 0, 0) in millimetres.
    direction : array_like, shape (3, 3)
        Orthonormal matrix whose columns are the world directions of the
        index axes.
    """

    data: np.ndarray
    spacing: np.ndarray = None
    origin: np.ndarray = None
    direction: np.ndarray = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValidationError(f"volume data must be 3-D and non-empty, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("volume data contains non-finite samples")
        spacing = np.ones(3) if self.spacing is None else np.array(self.spacing, dtype=float).reshape(3)
        origin = np.zeros(3) if self.origin is None else np.array(self.origin, dtype=float).reshape(3)
        direction = np.eye(3) if self.direction is None else np.array(self.direction, dtype=float).reshape(3, 3)
        if not np.all(spacing > 0) or not np.all(np.isfinite(spacing)):
            raise ValidationError(f"spacing must be positive, got {spacing.tolist()}")
        if not np.all(np.isfinite(origin)):
            raise ValidationError("origin must be finite")
        if np.max(np.abs(direction.T @ direction - np.eye(3))) > 1e-9:
            raise ValidationError("direction matrix is not orthonormal")
        for name, arr in (("data", data), ("spacing", spacing), ("origin", origin), ("direction", direction)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    # -- geometry -----------------------------------------------------------

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape)

    @property
    def n_voxels(self):
        return int(self.data.size)

    @cached_property
    def index_to_world_matrix(self):
        """3x3 linear part of the index to world map."""
        return self.direction * self.spacing[None, :]

    @cached_property
    def world_to_index_matrix(self):
        return self.direction.T / self.spacing[:, None]

    def index_to_world(self, idx):
        """Map continuous indices, shape (3,) or (n, 3), to world mm."""
        idx = np.asarray(idx, dtype=float)
        return idx @ self.index_to_world_matrix.T + self.origin

    def world_to_index(self, points):
        points = np.asarray(points, dtype=float)
        return (points - self.origin) @ self.world_to_index_matrix.T

    def voxel_indices(self):
        """All voxel indices in x-fastest order, shape (n_voxels, 3)."""
        nx, ny, nz = self.dims
        z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
        return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1).astype(float)

    def voxel_world_coords(self):
        return self.index_to_world(self.voxel_indices())

    def flat_values(self):
        """Intensities in the same x-fastest order as :meth:`voxel_indices`."""
        return self.data.ravel(order="F")

    def world_bounds(self):
        """Axis-aligned world bounding box of the voxel centers."""
        corners = np.array(
            [[i, j, k] for i in (0, self.dims[0] - 1) for j in (0, self.dims[1] - 1) for k in (0, self.dims[2] - 1)],
            dtype=float,
        )
        w = self.index_to_world(corners)
        return w.min(axis=0), w.max(axis=0)

    def same_geometry(self, other, tol=1e-9):
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=tol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=tol)
            and np.allclose(self.direction, other.direction, rtol=0, atol=tol)
        )

    def with_data(self, data):
        """New volume with this geometry and different samples."""
        return Volume(data, self.spacing, self.origin, self.direction)

    # -- interpolation ------------------------------------------------------

    @cached_property
    def bspline_coefficients(self):
        """Cubic B-spline coefficients, computed once.

        The samples are extended by ``SPLINE_PAD`` voxels per side with
        point-symmetric (odd) reflection, which continues linear trends, so
        the interpolant reproduces affine intensity fields.  The returned
        array is indexed with that padding offset.
        """
        padded = np.pad(self.data, SPLINE_PAD, mode="reflect", reflect_type="odd")
        coeffs = ndimage.spline_filter(padded, order=3, mode="mirror", output=np.float64)
        coeffs.setflags(write=False)
        return coeffs

    def interpolator(self, scheme=CUBIC):
        return Interpolator(self, scheme)


class Interpolator:
    """Vectorised sampler over a volume in continuous index space.

    The sampled domain is the voxel extent, ``[-0.5, n - 0.5]`` in continuous
    index along each axis; points outside it are reported as out of bounds.
    The cubic scheme evaluates the interpolating B-spline of the
    odd-reflection padded samples, so its 4x4x4 support is always available
    inside the domain.  The linear scheme extends its edge cells linearly
    over the outer half voxel; both schemes thus reproduce affine intensity
    fields everywhere in the domain.
    """

    def __init__(self, volume, scheme=CUBIC):
        self.volume = volume
        self.scheme = _normalize_scheme(scheme)
        self._dims = np.array(volume.dims)
        if self.scheme == CUBIC:
            self._table = volume.bspline_coefficients
        else:
            self._table = volume.data

    def inside(self, idx):
        upper = self._dims - 1 + _HALF_VOXEL
        return np.all((idx >= -_HALF_VOXEL) & (idx <= upper), axis=1)

    def sample_index(self, idx, gradient=False):
        """Interpolate at continuous indices ``idx`` of shape (n, 3).

        Returns ``(values, valid)`` or ``(values, grad, valid)`` where ``grad``
        is the derivative with respect to the continuous index.  Values and
        gradients of invalid points are zero.
        """
        idx = np.atleast_2d(np.asarray(idx, dtype=float))
        # snap round-off around voxel centers so grid queries hit samples exactly
        nearest = np.round(idx)
        idx = np.where(np.abs(idx - nearest) < _SNAP_TOL, nearest, idx)
        valid = self.inside(idx)
        n = idx.shape[0]
        values = np.zeros(n)
        grad = np.zeros((n, 3)) if gradient else None
        if np.any(valid):
            inner = idx[valid]
            if self.scheme == CUBIC:
                res = self._cubic(inner, gradient)
            else:
                res = self._linear(inner, gradient)
            values[valid] = res[0]
            # voxel centers return the stored sample bit for bit
            on_grid = valid & np.all(idx == nearest, axis=1) & np.all((nearest >= 0) & (nearest < self._dims), axis=1)
            if np.any(on_grid):
                g = nearest[on_grid].astype(np.int64)
                values[on_grid] = self.volume.data[g[:, 0], g[:, 1], g[:, 2]]
            if gradient:
                grad[valid] = res[1]
        if gradient:
            return values, grad, valid
        return values, valid

    def sample_world(self, points, gradient=False):
        """Like :meth:`sample_index` but for world points; gradients in world units."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        idx = self.volume.world_to_index(points)
        if not gradient:
            return self.sample_index(idx)
        values, g_idx, valid = self.sample_index(idx, gradient=True)
        # d idx / d world = world_to_index_matrix, so grad_world = M^T grad_idx
        return values, g_idx @ self.volume.world_to_index_matrix, valid

    def _gather(self, ix, iy, iz):
        return self._table[ix[:, :, None, None], iy[:, None, :, None], iz[:, None, None, :]]

    def _cubic(self, idx, gradient):
        base = np.floor(idx)
        t = idx - base
        base = base.astype(np.int64) - 1 + SPLINE_PAD
        offs = np.arange(4)
        ix = base[:, 0, None] + offs
        iy = base[:, 1, None] + offs
        iz = base[:, 2, None] + offs
        c = self._gather(ix, iy, iz)
        wx, wy, wz = (cubic_weights(t[:, a]) for a in range(3))
        cz = np.einsum("nabc,nc->nab", c, wz)
        cyz = np.einsum("nab,nb->na", cz, wy)
        values = np.einsum("na,na->n", cyz, wx)
        if not gradient:
            return (values,)
        dx, dy, dz = (cubic_weight_derivatives(t[:, a]) for a in range(3))
        gx = np.einsum("na,na->n", cyz, dx)
        gy = np.einsum("nab,na,nb->n", cz, wx, dy)
        gz = np.einsum("nabc,na,nb,nc->n", c, wx, wy, dz)
        return values, np.stack([gx, gy, gz], axis=1)

    def _linear(self, idx, gradient):
        dims = self._dims
        # the outer half voxel extrapolates the edge cell linearly
        base = np.clip(np.floor(idx), 0, np.maximum(dims - 2, 0))
        t = idx - base
        base = base.astype(np.int64)
        offs = np.arange(2)
        ix = np.minimum(base[:, 0, None] + offs, dims[0] - 1)
        iy = np.minimum(base[:, 1, None] + offs, dims[1] - 1)
        iz = np.minimum(base[:, 2, None] + offs, dims[2] - 1)
        c = self._gather(ix, iy, iz)
        wx, wy, wz = (np.stack([1.0 - t[:, a], t[:, a]], axis=1) for a in range(3))
        cz = np.einsum("nabc,nc->nab", c, wz)
        cyz = np.einsum("nab,nb->na", cz, wy)
        values = np.einsum("na,na->n", cyz, wx)
        if not gradient:
            return (values,)
        d = np.array([-1.0, 1.0])
        gx = cyz @ d
        gy = np.einsum("nab,na,b->n", cz, wx, d)
        gz = np.einsum("nabc,na,nb,c->n", c, wx, wy, d)
        # flat axes (n == 1) carry no gradient
        g = np.stack([gx, gy, gz], axis=1)
        g[:, dims == 1] = 0.0
        return values, g


def index_to_world(v, idx):
    return v.index_to_world(idx)


def world_to_index(v, p):
    return v.world_to_index(p)


def interpolate(v, p, scheme=CUBIC):
    """Interpolate ``v`` at a single world point.

    Raises
    ------
    OutOfBoundsError
        If the point lies outside the sampled grid.
    """
    values, valid = Interpolator(v, scheme).sample_world(np.asarray(p, dtype=float).reshape(1, 3))
    if not valid[0]:
        raise OutOfBoundsError(f"point {list(np.ravel(p))} lies outside the volume")
    return float(values[0])


def resample(moving, reference, transform, scheme=CUBIC, padding=0.0):
    """Pull ``moving`` onto the grid of ``reference``.

    ``transform`` maps reference (fixed) world points into moving world space.
    """
    points = reference.voxel_world_coords()
    mapped = transform.transform_points(points) if transform is not None else points
    values, valid = Interpolator(moving, scheme).sample_world(mapped)
    values = np.where(valid, values, padding)
    return reference.with_data(values.reshape(reference.dims, order="F"))
