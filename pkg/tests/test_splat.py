import numpy as np
import pytest

from hgg_avatar.utils.consts import COV2D_FLOOR, TRANSMITTANCE_EPS
from hgg_avatar.utils.oracles import oracle_render
from hgg_avatar.utils.splat_utils import (
    RenderedImage,
    bounding_boxes,
    composite_pixel,
    covariance3d,
    footprint_weight,
    project_cloud,
    project_gaussian,
    render,
    transmittance_before,
)
from hgg_avatar.utils.types import Camera, GaussianCloud

from conftest import make_cloud, random_cloud


def test_single_splat_closed_form(front_camera):
    """isotropic Gaussian on the optical axis: var = (f s / z)^2 + floor"""
    image = render(make_cloud([[0.0, 0.0, 0.0]], opacity=0.5, scale=0.1, color=(1.0, 0.5, 0.25)), front_camera)
    var = (10.0 * 0.1 / 5.0) ** 2 + COV2D_FLOOR

    assert image.alpha[4, 4] == pytest.approx(0.5)
    np.testing.assert_allclose(image.rgb[4, 4], [0.5, 0.25, 0.125])
    assert image.alpha[4, 5] == pytest.approx(0.5 * np.exp(-0.5 / var))
    assert image.alpha[5, 5] == pytest.approx(0.5 * np.exp(-1.0 / var))
    # 4 / var is beyond the 3-sigma cutoff
    assert image.alpha[4, 6] == 0.0
    assert image.alpha[0, 0] == 0.0


def test_two_splats_composite_front_to_back(front_camera):
    front, back = np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])
    cloud = GaussianCloud(
        centers=[[0.0, 0.0, -1.0], [0.0, 0.0, 0.0]],
        opacities=[0.5, 0.5],
        scales=[[0.1] * 3, [0.1] * 3],
        rotations=[[1.0, 0.0, 0.0, 0.0]] * 2,
        colors=[back, front],
    )
    image = render(cloud, front_camera)
    np.testing.assert_allclose(image.rgb[4, 4], 0.5 * front + 0.25 * back)
    assert image.alpha[4, 4] == pytest.approx(0.75)


def test_empty_scene_is_transparent(front_camera):
    image = render(GaussianCloud.empty(), front_camera)
    assert image.rgb.shape == (9, 9, 3)
    assert not image.rgb.any()
    assert not image.alpha.any()


def test_gaussians_behind_the_camera_are_culled(front_camera):
    cloud = make_cloud([[0.0, 0.0, 6.0], [0.0, 0.0, 5.0], [0.0, 0.0, 0.0]])
    assert project_gaussian(cloud[0], front_camera) is None
    assert project_gaussian(cloud[1], front_camera) is None
    batch = project_cloud(cloud, front_camera)
    assert batch.source.tolist() == [2]


def test_sort_by_depth_then_index(front_camera):
    cloud = make_cloud([[0.0, 0.0, -2.0], [0.3, 0.0, 0.0], [-0.3, 0.0, 0.0], [0.0, 0.0, 1.0]])
    batch = project_cloud(cloud, front_camera)
    assert batch.source.tolist() == [3, 1, 2, 0]
    assert np.all(np.diff(batch.depth) >= 0)


def test_projection_of_offset_center(front_camera):
    splat = project_gaussian(make_cloud([[0.2, 0.1, 0.0]])[0], front_camera)
    np.testing.assert_allclose(splat.mean2d, [4.4, 3.8])
    assert splat.depth == pytest.approx(5.0)
    np.testing.assert_allclose(splat.cov2d, splat.cov2d.T)


def test_covariance_is_rotation_invariant_for_spheres(rng):
    quats = rng.normal(size=(5, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    cov = covariance3d(np.full((5, 3), 0.2), quats)
    np.testing.assert_allclose(cov, np.broadcast_to(0.04 * np.eye(3), (5, 3, 3)), atol=1e-12)


def test_bounding_boxes_cover_the_ellipse(front_camera):
    batch = project_cloud(make_cloud([[0.0, 0.0, 0.0]], scale=0.5), front_camera)
    x0, x1, y0, y1 = bounding_boxes(batch, 9, 9)[0]
    radius = 3.0 * np.sqrt(batch.cov2d[0, 0, 0])
    assert x0 <= 4 - radius and x1 >= min(8, 4 + radius)
    assert y0 <= 4 - radius and y1 >= min(8, 4 + radius)


def test_composite_pixel_matches_render(front_camera, rng):
    cloud = random_cloud(rng, 12, spread=0.5)
    image = render(cloud, front_camera)
    batch = project_cloud(cloud, front_camera)
    splats = [batch[i] for i in range(len(batch))]
    for px, py in [(4, 4), (2, 6), (7, 1)]:
        weights = [footprint_weight(s, (px, py)) for s in splats]
        rgb, alpha = composite_pixel(splats, weights)
        np.testing.assert_allclose(image.rgb[py, px], rgb, atol=1e-12)
        assert image.alpha[py, px] == pytest.approx(alpha, abs=1e-12)


def test_transmittance_is_exclusive_product():
    alphas = np.array([[0.5], [0.5], [0.5]])
    np.testing.assert_allclose(transmittance_before(alphas)[:, 0], [1.0, 0.5, 0.25])


def test_fast_renderer_matches_oracle(rng):
    """100 random scenes of up to 50 Gaussians on 64 x 64 agree with the brute-force renderer"""
    camera = Camera.look_at([0.0, 0.0, 4.0], np.zeros(3), [0.0, 1.0, 0.0], 80.0, 64, 64)
    for _ in range(100):
        cloud = random_cloud(rng, int(rng.integers(0, 51)), max_opacity=0.3)
        fast = render(cloud, camera)
        slow = oracle_render(cloud, camera)
        assert np.abs(fast.rgb - slow.rgb).max() < 1e-5
        assert np.abs(fast.alpha - slow.alpha).max() < 1e-5


def test_rendered_image_is_read_only(front_camera):
    image = render(make_cloud([[0.0, 0.0, 0.0]]), front_camera)
    assert isinstance(image, RenderedImage)
    with pytest.raises(ValueError):
        image.rgb[0, 0, 0] = 1.0


def test_covariance_eigenvalues_are_squared_scales(rng):
    quats = rng.normal(size=(50, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    scales = rng.uniform(0.01, 0.5, size=(50, 3))
    eigenvalues = np.linalg.eigvalsh(covariance3d(scales, quats))
    np.testing.assert_allclose(eigenvalues, np.sort(scales ** 2, axis=1), atol=1e-12)


def test_adding_a_gaussian_never_lowers_alpha(rng):
    """transmittance can only shrink as Gaussians are added"""
    camera = Camera.look_at([0.0, 0.0, 4.0], np.zeros(3), [0.0, 1.0, 0.0], 20.0, 16, 16)
    for _ in range(20):
        cloud = random_cloud(rng, 12, spread=0.6, max_opacity=0.9)
        extra = random_cloud(rng, 1, spread=0.6, max_opacity=0.9)
        grown = GaussianCloud(
            centers=np.concatenate([cloud.centers, extra.centers]),
            opacities=np.concatenate([cloud.opacities, extra.opacities]),
            scales=np.concatenate([cloud.scales, extra.scales]),
            rotations=np.concatenate([cloud.rotations, extra.rotations]),
            colors=np.concatenate([cloud.colors, extra.colors]),
        )
        assert np.all(oracle_render(grown, camera).alpha >= oracle_render(cloud, camera).alpha - 1e-12)
        assert np.all(render(grown, camera).alpha >= render(cloud, camera).alpha - TRANSMITTANCE_EPS)


def test_input_order_does_not_change_the_image(rng):
    camera = Camera.look_at([0.0, 0.0, 4.0], np.zeros(3), [0.0, 1.0, 0.0], 20.0, 16, 16)
    cloud = random_cloud(rng, 30, spread=0.6, max_opacity=0.8)
    ref = render(cloud, camera)
    out = render(cloud.take(np.arange(len(cloud))[::-1]), camera)
    np.testing.assert_allclose(out.rgb, ref.rgb, atol=1e-12)
    np.testing.assert_allclose(out.alpha, ref.alpha, atol=1e-12)


def test_opaque_stack_early_out_stays_within_cutoff(front_camera):
    """dropping splats behind T < 1e-4 moves no pixel by more than the cutoff"""
    centers = [[0.0, 0.0, -0.1 * k] for k in range(20)]
    cloud = make_cloud(centers, opacity=0.99, scale=0.1, color=(1.0, 0.5, 0.25))
    fast = render(cloud, front_camera)
    slow = oracle_render(cloud, front_camera)
    assert np.abs(fast.alpha - slow.alpha).max() <= TRANSMITTANCE_EPS
    assert np.abs(fast.rgb - slow.rgb).max() <= TRANSMITTANCE_EPS
    assert fast.alpha[4, 4] >= 1.0 - TRANSMITTANCE_EPS
