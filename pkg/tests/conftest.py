import numpy as np
import pytest

from hgg_avatar.utils.synth_utils import make_body, make_scene
from hgg_avatar.utils.types import Camera, GaussianCloud


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def body():
    return make_body(subdivisions=1, n_joints=3)


@pytest.fixture(scope="session")
def small_scene(body):
    return make_scene(body, frames=3, gaussians=48, n_cameras=2, seed=3, image_size=16)


@pytest.fixture
def front_camera():
    """Camera on +z looking at the origin; the optical axis hits pixel (4, 4) of a 9 x 9 image."""
    return Camera.look_at(np.array([0.0, 0.0, 5.0]), np.zeros(3), np.array([0.0, 1.0, 0.0]), 10.0, 9, 9)


def make_cloud(centers, opacity=0.5, scale=0.1, color=(0.5, 0.5, 0.5)) -> GaussianCloud:
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    m = centers.shape[0]
    rotations = np.zeros((m, 4))
    rotations[:, 0] = 1.0
    return GaussianCloud(
        centers=centers,
        opacities=np.broadcast_to(np.asarray(opacity, dtype=np.float64), (m,)),
        scales=np.broadcast_to(np.asarray(scale, dtype=np.float64), (m,))[:, None].repeat(3, axis=1),
        rotations=rotations,
        colors=np.broadcast_to(np.asarray(color, dtype=np.float64), (m, 3)),
    )


def random_cloud(rng, m, spread=1.0, max_opacity=0.4, scale_range=(0.02, 0.15)) -> GaussianCloud:
    quats = rng.normal(size=(m, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return GaussianCloud(
        centers=rng.uniform(-spread, spread, size=(m, 3)),
        opacities=rng.uniform(0.05, max_opacity, size=m),
        scales=rng.uniform(*scale_range, size=(m, 3)),
        rotations=quats,
        colors=rng.uniform(0.0, 1.0, size=(m, 3)),
    )
