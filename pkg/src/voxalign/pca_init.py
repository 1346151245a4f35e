"""Principal-axes initialization from foreground point clouds.

The frames describe each foreground cloud by its centroid and its principal
axes.  ``initial_alignment`` pairs the axes of a moving frame with those of a
fixed frame and produces the rotation/translation that carries moving points
onto fixed points (``x_fixed = R x_moving + T``).
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegeneratePointCloud
from .transforms import AffineTransform

# relative eigenvalue gap below which axis pairing is ambiguous
EIGEN_TIE_TOL = 1e-9


@dataclass(frozen=True)
class PcaFrame:
    centroid: np.ndarray
    axes: np.ndarray  # rows are eigenvectors, largest eigenvalue first
    eigenvalues: np.ndarray
    point_count: int


@dataclass(frozen=True)
class InitialAlignment:
    rotation: np.ndarray
    translation: np.ndarray
    distance: float
    angles: tuple  # degrees, axial / coronal / sagittal
    reflection_corrected: bool = False
    fixed_centroid: np.ndarray = None
    moving_centroid: np.ndarray = None

    def diagnostics(self):
        return {
            "d": self.distance,
            "theta1": self.angles[0],
            "theta2": self.angles[1],
            "theta3": self.angles[2],
            "reflection_corrected": self.reflection_corrected,
        }


def foreground_points(v, mask):
    """World coordinates of voxel centers where ``mask`` is set."""
    if v.dims != mask.dims:
        raise DegeneratePointCloud(f"mask dims {mask.dims} differ from volume dims {v.dims}")
    sel = np.argwhere(mask.data > 0.5).astype(float)
    return v.index_to_world(sel)


def pca_frame_from_points(points):
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(points)
    if n < 4:
        raise DegeneratePointCloud(f"need at least 4 foreground points, got {n}")
    centroid = points.mean(axis=0)
    centered = points - centroid
    cov = centered.T @ centered / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    axes = evecs[:, order].T
    if evals[0] <= 0 or evals[2] <= 1e-12 * evals[0]:
        raise DegeneratePointCloud(f"rank-deficient point cloud, eigenvalues {evals.tolist()}")
    gaps = (evals[:-1] - evals[1:]) / evals[0]
    if np.any(gaps < EIGEN_TIE_TOL):
        raise DegeneratePointCloud(f"near-equal eigenvalues {evals.tolist()}: axis pairing is ambiguous")
    # sign: largest-magnitude component positive
    for k in range(3):
        if axes[k, np.argmax(np.abs(axes[k]))] < 0:
            axes[k] = -axes[k]
    return PcaFrame(centroid, axes, evals, n)


def compute_pca_frame(v, mask):
    return pca_frame_from_points(foreground_points(v, mask))


def _plane_angle(a, b, dims):
    pa, pb = a[list(dims)], b[list(dims)]
    na, nb = np.linalg.norm(pa), np.linalg.norm(pb)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    c = np.clip(np.dot(pa, pb) / (na * nb), -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def initial_alignment(fixed, moving):
    """Rotation and translation carrying the moving frame onto the fixed one.

    With eigenvector matrices ``V`` holding eigenvectors as columns,
    ``R = V_fixed V_moving^T``.  A reflection (det = -1) is repaired with the
    checking matrix ``diag(1, 1, det R)`` inserted between the two factors,
    which flips the pairing of the least significant axis.  The translation
    is ``mu_fixed - R mu_moving``.
    """
    vf = fixed.axes.T
    vm = moving.axes.T
    rot = vf @ vm.T
    det = np.linalg.det(rot)
    check = np.diag([1.0, 1.0, 1.0 if det > 0 else -1.0])
    rot_c = vf @ check @ vm.T
    trans = fixed.centroid - rot_c @ moving.centroid
    pf, pm = fixed.axes[0], moving.axes[0]
    angles = (_plane_angle(pf, pm, (0, 1)), _plane_angle(pf, pm, (0, 2)), _plane_angle(pf, pm, (1, 2)))
    return InitialAlignment(
        rotation=rot_c,
        translation=trans,
        distance=float(np.linalg.norm(fixed.centroid - moving.centroid)),
        angles=angles,
        reflection_corrected=bool(det < 0),
        fixed_centroid=fixed.centroid,
        moving_centroid=moving.centroid,
    )


def to_affine_seed(a):
    """``x' = R x + T`` as an affine (scale and shear identity); maps moving
    points onto fixed points."""
    return AffineTransform(a.rotation, a.translation, np.zeros(3))


def registration_seed(a, center=None):
    """Fixed-to-moving affine for the registration stages.

    The pipeline pulls moving intensities back onto the fixed grid, so it
    needs the inverse of :func:`to_affine_seed`, expressed about ``center``
    (default: the fixed centroid).
    """
    if center is None:
        center = a.fixed_centroid if a.fixed_centroid is not None else np.zeros(3)
    return to_affine_seed(a).inverse().with_center(center)
