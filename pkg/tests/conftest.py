import numpy as np
import pytest

from artiplane.harness import dataset_split, make_synthetic_scene


@pytest.fixture(scope="session")
def capsule2_scene():
    return make_synthetic_scene("capsule2")


@pytest.fixture(scope="session")
def small_dataset(capsule2_scene):
    """Cheap 24x24 dataset for pipeline tests (not the acceptance runs)."""
    return dataset_split(capsule2_scene, n_views=3, n_times=4, width=24,
                         samples_per_ray=192, train_views=2)


def rand_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation via QR with positive determinant."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
