"""Multimodal 3-D volume registration: EM/PCA initialization, Mattes mutual
information, multi-resolution affine and B-spline stages."""

__version__ = "0.1.0"

from .errors import VoxalignError
from .evaluation import PhantomSpec, compute_tre, generate_phantom
from .io_formats import read_metaimage, read_transform_json, write_metaimage, write_transform_json
from .pipeline import RegistrationConfig, RegistrationResult, register
from .transforms import AffineTransform, BSplineTransform, CompositeTransform
from .volume import Volume, resample

__all__ = [
    "AffineTransform",
    "BSplineTransform",
    "CompositeTransform",
    "PhantomSpec",
    "RegistrationConfig",
    "RegistrationResult",
    "Volume",
    "VoxalignError",
    "compute_tre",
    "generate_phantom",
    "read_metaimage",
    "read_transform_json",
    "register",
    "resample",
    "write_metaimage",
    "write_transform_json",
]
