"""Affine and cubic B-spline free-form deformation transforms.

All transforms map fixed-space world points (mm) into moving space.  Besides
pointwise application each transform exposes what the metric needs for an
analytic gradient: ``precompute`` caches per-point data for a fixed sample
set, and ``pullback`` contracts per-point row vectors ``dC/dy`` with the
parameter Jacobian.
"""

import numpy as np
from scipy import sparse

from .bspline import cubic_weights

# --------------------------------------------------------------------------
# affine


class AffineTransform:
    """``y = matrix @ (x - center) + center + offset``.

    The 12 parameters are the matrix entries in row-major order followed by
    the offset.  ``center`` is fixed and not optimised.
    """

    kind = "affine"

    def __init__(self, matrix=None, offset=None, center=None):
        self.matrix = np.eye(3) if matrix is None else np.array(matrix, dtype=float).reshape(3, 3)
        self.offset = np.zeros(3) if offset is None else np.array(offset, dtype=float).reshape(3)
        self.center = np.zeros(3) if center is None else np.array(center, dtype=float).reshape(3)

    @classmethod
    def identity(cls, center=None):
        return cls(center=center)

    @property
    def n_parameters(self):
        return 12

    @property
    def parameters(self):
        return np.concatenate([self.matrix.ravel(), self.offset])

    def with_parameters(self, params):
        params = np.asarray(params, dtype=float)
        return AffineTransform(params[:9], params[9:12], self.center)

    def with_center(self, center):
        """Same map expressed about a different center."""
        center = np.asarray(center, dtype=float)
        # A(x - c) + c + t == A(x - c') + c' + t'  =>  t' = t + (A - I)(c' - c)
        offset = self.offset + (self.matrix - np.eye(3)) @ (center - self.center)
        return AffineTransform(self.matrix, offset, center)

    def homogeneous(self):
        h = np.eye(4)
        h[:3, :3] = self.matrix
        h[:3, 3] = self.center + self.offset - self.matrix @ self.center
        return h

    def inverse(self):
        """Inverse map, expressed about the image of ``center``."""
        inv = np.linalg.inv(self.matrix)
        new_center = self.apply(self.center)
        # x = inv (y - c') + c  with c' = A c... written about c'
        return AffineTransform(inv, self.center - new_center, new_center)

    def apply(self, p):
        return self.transform_points(np.asarray(p, dtype=float).reshape(1, 3))[0]

    def transform_points(self, points, cache=None):
        points = np.asarray(points, dtype=float)
        return (points - self.center) @ self.matrix.T + self.center + self.offset

    def precompute(self, points):
        return None

    def pullback(self, points, v, cache=None):
        """Sum over points of ``v_i^T dy_i/dparams``."""
        points = np.asarray(points, dtype=float)
        d = points - self.center
        g_matrix = v.T @ d
        return np.concatenate([g_matrix.ravel(), v.sum(axis=0)])

    def jacobian_wrt_parameters(self, p):
        d = np.asarray(p, dtype=float).reshape(3) - self.center
        jac = np.zeros((3, 12))
        for r in range(3):
            jac[r, 3 * r : 3 * r + 3] = d
        jac[:, 9:] = np.eye(3)
        return jac

    def __repr__(self):
        return f"AffineTransform(matrix={self.matrix.tolist()}, offset={self.offset.tolist()}, center={self.center.tolist()})"


# --------------------------------------------------------------------------
# B-spline FFD


class BSplineTransform:
    """Cubic B-spline free-form deformation ``y = x + d(x)``.

    The lattice has ``grid_cells + 3`` control points per axis.  Control
    point ``k`` along an axis sits at ``domain_origin + (k - 1) * spacing``, so
    the nodes extend one cell beyond the domain on each side.  Points outside
    ``[domain_origin, domain_origin + cells * spacing]`` are not displaced.

    Parameters are laid out component-major: all x displacements, then y,
    then z, each over the lattice in C order.
    """

    kind = "bspline"

    def __init__(self, grid_cells, domain_origin, grid_spacing, coefficients=None):
        self.grid_cells = tuple(int(c) for c in np.ravel(grid_cells))
        if len(self.grid_cells) != 3 or min(self.grid_cells) < 1:
            raise ValueError(f"grid_cells must be three integers >= 1, got {grid_cells}")
        self.domain_origin = np.array(domain_origin, dtype=float).reshape(3)
        self.grid_spacing = np.array(grid_spacing, dtype=float).reshape(3)
        shape = (3,) + self.lattice_shape
        if coefficients is None:
            self.coefficients = np.zeros(shape)
        else:
            self.coefficients = np.array(coefficients, dtype=float).reshape(shape)

    @classmethod
    def covering(cls, lo, hi, grid_cells):
        """Zero transform whose domain is the box ``[lo, hi]``."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        cells = np.array(np.broadcast_to(grid_cells, 3), dtype=int)
        extent = np.where(hi > lo, hi - lo, 1.0)
        return cls(cells, lo, extent / cells)

    @property
    def lattice_shape(self):
        return tuple(c + 3 for c in self.grid_cells)

    @property
    def n_control_points(self):
        return int(np.prod(self.lattice_shape))

    @property
    def n_parameters(self):
        return 3 * self.n_control_points

    @property
    def parameters(self):
        return self.coefficients.ravel().copy()

    @property
    def domain_upper(self):
        return self.domain_origin + np.array(self.grid_cells) * self.grid_spacing

    def node_positions(self):
        """World coordinates of every control point, shape (n_control_points, 3)."""
        axes = [self.domain_origin[a] + (np.arange(self.lattice_shape[a]) - 1) * self.grid_spacing[a] for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def with_parameters(self, params):
        return BSplineTransform(self.grid_cells, self.domain_origin, self.grid_spacing, params)

    def zero_like(self):
        return BSplineTransform(self.grid_cells, self.domain_origin, self.grid_spacing)

    def support(self, points):
        """Flat control-point indices and tensor weights, each (n, 64), plus inside mask."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        cells = np.array(self.grid_cells)
        u = (points - self.domain_origin) / self.grid_spacing
        # a whisker of tolerance keeps domain-boundary voxel centers inside
        inside = np.all((u >= -1e-9) & (u <= cells + 1e-9), axis=1)
        u = np.clip(u, 0.0, cells)
        base = np.minimum(np.floor(u), cells - 1)
        t = u - base
        base = base.astype(np.int64)
        w = [cubic_weights(t[:, a]) for a in range(3)]
        offs = np.arange(4)
        py, pz = self.lattice_shape[1], self.lattice_shape[2]
        ix = base[:, 0, None] + offs
        iy = base[:, 1, None] + offs
        iz = base[:, 2, None] + offs
        flat = (ix[:, :, None, None] * py + iy[:, None, :, None]) * pz + iz[:, None, None, :]
        weights = w[0][:, :, None, None] * w[1][:, None, :, None] * w[2][:, None, None, :]
        n = points.shape[0]
        flat = flat.reshape(n, 64)
        weights = weights.reshape(n, 64)
        weights[~inside] = 0.0
        return flat, weights, inside

    def precompute(self, points):
        return self.support(points)

    def displacement(self, points, cache=None):
        flat, weights, _ = self.support(points) if cache is None else cache
        coeffs = self.coefficients.reshape(3, -1)
        return np.stack([np.einsum("nk,nk->n", coeffs[c][flat], weights) for c in range(3)], axis=1)

    def transform_points(self, points, cache=None):
        points = np.asarray(points, dtype=float)
        return points + self.displacement(points, cache)

    def apply(self, p):
        return self.transform_points(np.asarray(p, dtype=float).reshape(1, 3))[0]

    def pullback(self, points, v, cache=None):
        flat, weights, _ = self.support(points) if cache is None else cache
        ncp = self.n_control_points
        grads = [np.bincount(flat.ravel(), weights=(weights * v[:, c, None]).ravel(), minlength=ncp) for c in range(3)]
        return np.concatenate(grads)

    def jacobian_wrt_parameters(self, p):
        """Sparse (3, n_parameters) Jacobian at one point; at most 192 nonzeros."""
        flat, weights, _ = self.support(np.asarray(p, dtype=float).reshape(1, 3))
        ncp = self.n_control_points
        rows = np.repeat(np.arange(3), 64)
        cols = np.concatenate([flat[0] + c * ncp for c in range(3)])
        vals = np.tile(weights[0], 3)
        keep = vals != 0.0
        return sparse.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(3, self.n_parameters))

    def __repr__(self):
        return f"BSplineTransform(cells={self.grid_cells}, origin={self.domain_origin.tolist()}, spacing={self.grid_spacing.tolist()})"


def refine_grid(t, grid_cells, probes_per_axis=10):
    """Fit ``t``'s displacement field on a lattice with ``grid_cells`` cells.

    The fit is the least-squares solution over a regular ``probes_per_axis``^3
    set of probe points spanning the domain.  Because the basis is a tensor
    product the problem separates into three small 1-D pseudo-inverses.

    Returns
    -------
    refined : BSplineTransform
    rms_error : float
        Root-mean-square residual (mm) of the fitted field at the probes.
    """
    cells = np.array(np.broadcast_to(grid_cells, 3), dtype=int)
    spacing = (t.domain_upper - t.domain_origin) / cells
    new = BSplineTransform(cells, t.domain_origin, spacing)
    n_probe = np.maximum(int(probes_per_axis), cells + 3)
    axes = [np.linspace(t.domain_origin[a], t.domain_upper[a], n_probe[a]) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    probes = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    target = t.displacement(probes).reshape(tuple(n_probe) + (3,))

    pinvs = []
    for a in range(3):
        u = np.clip((axes[a] - new.domain_origin[a]) / new.grid_spacing[a], 0.0, cells[a])
        base = np.minimum(np.floor(u), cells[a] - 1)
        w = cubic_weights(u - base)
        colloc = np.zeros((n_probe[a], cells[a] + 3))
        for i in range(n_probe[a]):
            colloc[i, int(base[i]) : int(base[i]) + 4] = w[i]
        pinvs.append(np.linalg.pinv(colloc))
    coeffs = np.einsum("ia,jb,kc,abcd->dijk", pinvs[0], pinvs[1], pinvs[2], target, optimize=True)
    refined = new.with_parameters(coeffs.ravel())
    resid = refined.displacement(probes) - target.reshape(-1, 3)
    return refined, float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))


# --------------------------------------------------------------------------
# composition


class CompositeTransform:
    """``y = global(local(x))``; only the local transform's parameters are free."""

    kind = "composite"

    def __init__(self, global_transform, local_transform):
        self.global_transform = global_transform
        self.local_transform = local_transform

    @property
    def n_parameters(self):
        return self.local_transform.n_parameters

    @property
    def parameters(self):
        return self.local_transform.parameters

    def with_parameters(self, params):
        return CompositeTransform(self.global_transform, self.local_transform.with_parameters(params))

    def precompute(self, points):
        return self.local_transform.precompute(points)

    def transform_points(self, points, cache=None):
        return self.global_transform.transform_points(self.local_transform.transform_points(points, cache))

    def apply(self, p):
        return self.transform_points(np.asarray(p, dtype=float).reshape(1, 3))[0]

    def pullback(self, points, v, cache=None):
        # global is affine: dy/dlocal = matrix
        return self.local_transform.pullback(points, v @ self.global_transform.matrix, cache)

    def jacobian_wrt_parameters(self, p):
        jac = self.local_transform.jacobian_wrt_parameters(p)
        return sparse.csr_matrix(self.global_transform.matrix) @ jac


def compose(global_transform, local_transform):
    return CompositeTransform(global_transform, local_transform)


def apply(t, p):
    return t.apply(p)


def jacobian_wrt_parameters(t, p):
    return t.jacobian_wrt_parameters(p)
