import numpy as np
import pytest

from voxalign.evaluation import PhantomSpec, generate_phantom
from voxalign.volume import Volume


def make_volume(data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), direction=None):
    return Volume(np.asarray(data, dtype=float), spacing, origin, np.eye(3) if direction is None else direction)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_phantom():
    spec = PhantomSpec(dims=(40, 40, 16), rotation_deg=(0.0, 0.0, 6.0), translation=(1.5, -1.0, 0.5), blur_mm=0.3, noise=0.005)
    return generate_phantom(spec)
