"""Deterministic synthetic bodies, pose sequences and Gaussian scenes.

The synthetic body is an icosphere stretched into a capsule-like shape with a
joint chain along its long (y) axis. Scenes sample Gaussians near the posed
surface in every frame; their colors come from a smooth procedural texture of
the canonical position plus per-frame noise, so that aggregating a vertex's
Gaussians across frames recovers the clean appearance.

Training cameras sit on a front arc and the held-out camera looks at the back.
In the reference frame the Gaussians on back- and side-facing vertices are
faded, so repairing them on the unseen back needs what the other frames say
about those vertices rather than a per-vertex correction fitted to the
training views.
"""
import logging
from dataclasses import dataclass
from multiprocessing.pool import ThreadPool
from typing import List, Optional, Tuple

import numpy as np

from hgg_avatar.utils.lbs_utils import (
    bind_gaussians,
    blend_transforms,
    joint_transforms,
    lbs_pose_vertices,
    repose_gaussians,
)
from hgg_avatar.utils.oracles import oracle_render
from hgg_avatar.utils.splat_utils import RenderedImage
from hgg_avatar.utils.template_utils import keep_top_influences
from hgg_avatar.utils.types import BodyTemplate, Camera, GaussianCloud, GaussianFrame, Pose

logger = logging.getLogger(__name__)

_PHI = (1.0 + np.sqrt(5.0)) / 2.0
_ICOSAHEDRON_VERTICES = np.array([
    [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
    [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
    [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
])
_ICOSAHEDRON_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
])

# texture directions and phases, one per color channel
_TEXTURE_DIRS = np.array([[0.6, 0.8, 0.0], [0.0, 0.6, 0.8], [0.8, 0.0, 0.6]])
_TEXTURE_PHASES = np.array([0.0, 2.1, 4.2])
_TEXTURE_FREQ = 2.5

_CLEAN_OPACITY = 0.8
# vertices whose canonical normal has z below this are faded in the reference frame
_FADE_FRONT_COS = 0.25
_FRONT_ARC = np.radians(60.0)
_ELEVATION = np.radians(10.0)


@dataclass(frozen=True)
class SyntheticScene:
    """Synthetic video of one body: frames, poses, cameras and oracle-rendered ground truth.

    gt_images[t][c] is the clean avatar reposed to poses[t] and seen by
    cameras[c]. The last camera, looking at the back of the body, is held out
    from training when there are two or more.
    """

    template: BodyTemplate
    poses: Tuple[Pose, ...]
    frames: Tuple[GaussianFrame, ...]
    cameras: Tuple[Camera, ...]
    gt_images: Tuple[Tuple[RenderedImage, ...], ...]
    seed: int
    avatar: GaussianCloud
    t0: int = 0

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def heldout_camera(self) -> Optional[int]:
        return len(self.cameras) - 1 if len(self.cameras) >= 2 else None

    @property
    def training_cameras(self) -> List[int]:
        return [c for c in range(len(self.cameras)) if c != self.heldout_camera]


def icosphere(subdivisions: int):
    """Unit icosphere: 10 * 4^s + 2 vertices and 20 * 4^s outward-oriented faces."""
    vertices = _ICOSAHEDRON_VERTICES / np.linalg.norm(_ICOSAHEDRON_VERTICES, axis=1, keepdims=True)
    faces = _ICOSAHEDRON_FACES.copy()
    for _ in range(subdivisions):
        edges = np.sort(faces[:, [[0, 1], [1, 2], [2, 0]]], axis=-1).reshape(-1, 2)
        unique, inverse = np.unique(edges, axis=0, return_inverse=True)
        mid = vertices[unique[:, 0]] + vertices[unique[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        ids = (len(vertices) + inverse.reshape(-1)).reshape(-1, 3)
        ab, bc, ca = ids[:, 0], ids[:, 1], ids[:, 2]
        a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
        faces = np.concatenate([
            np.stack([a, ab, ca], axis=1),
            np.stack([b, bc, ab], axis=1),
            np.stack([c, ca, bc], axis=1),
            np.stack([ab, bc, ca], axis=1),
        ])
        vertices = np.concatenate([vertices, mid])
    return vertices, faces


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals."""
    v0, v1, v2 = (vertices[faces[:, i]] for i in range(3))
    face_normals = np.cross(v1 - v0, v2 - v0)
    normals = np.zeros_like(vertices)
    for i in range(3):
        np.add.at(normals, faces[:, i], face_normals)
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def make_body(subdivisions: int = 2, n_joints: int = 4, radius: float = 0.4,
              half_height: float = 1.5) -> BodyTemplate:
    """Capsule-like body with a joint chain along y and two-joint smooth skin weights."""
    if not 0 <= subdivisions <= 4:
        raise ValueError(f"subdivisions must be in [0, 4], got {subdivisions}")
    if n_joints < 1:
        raise ValueError(f"n_joints must be at least 1, got {n_joints}")

    sphere, faces = icosphere(subdivisions)
    vertices = sphere * np.array([radius, half_height, radius])

    if n_joints == 1:
        joint_y = np.zeros(1)
        sigma = half_height
    else:
        joint_y = np.linspace(-0.8 * half_height, 0.8 * half_height, n_joints)
        sigma = joint_y[1] - joint_y[0]
    joint_rest = np.stack([np.zeros(n_joints), joint_y, np.zeros(n_joints)], axis=1)
    parents = np.arange(n_joints) - 1

    d2 = ((vertices[:, None, :] - joint_rest[None, :, :]) ** 2).sum(-1)
    falloff = np.exp(-(d2 - d2.min(axis=1, keepdims=True)) / (2.0 * sigma ** 2))
    weights = keep_top_influences(falloff, max_influences=min(2, n_joints))

    shape_dirs = np.zeros((len(vertices), 3, 10))
    # beta[0] widens the body, beta[1] lengthens it
    shape_dirs[:, 0, 0] = 0.1 * sphere[:, 0]
    shape_dirs[:, 2, 0] = 0.1 * sphere[:, 2]
    shape_dirs[:, 1, 1] = 0.1 * sphere[:, 1]

    return BodyTemplate(
        rest_vertices=vertices,
        faces=faces,
        joint_rest=joint_rest,
        joint_parents=parents,
        skin_weights=weights,
        shape_dirs=shape_dirs,
    )


def make_pose_sequence(template: BodyTemplate, frames: int, seed: int = 0, amplitude: float = 0.5) -> List[Pose]:
    """Smooth periodic joint-angle trajectory: every joint bends about a fixed horizontal axis."""
    rng = np.random.default_rng([seed, 0])
    k = template.n_joints
    angle = rng.uniform(0.0, 2.0 * np.pi, size=k)
    axes = np.stack([np.cos(angle), np.zeros(k), np.sin(angle)], axis=1)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=k)
    twist_phase = rng.uniform(0.0, 2.0 * np.pi)

    poses = []
    for t in range(frames):
        s = 2.0 * np.pi * t / max(frames, 1)
        theta = amplitude * np.sin(s + phases)[:, None] * axes
        # the root also twists about the body axis
        theta[0] = [0.0, amplitude * np.sin(s + twist_phase), 0.0]
        poses.append(Pose(theta=theta))
    return poses


def make_cameras(n_cameras: int, image_size: int, distance: float = 4.0) -> List[Camera]:
    """Training cameras on a front arc; with two or more, the last one looks at the back and is held out."""
    if n_cameras < 1:
        raise ValueError(f"n_cameras must be at least 1, got {n_cameras}")
    focal = image_size * distance / 4.0
    n_train = max(n_cameras - 1, 1)
    if n_train == 1:
        azimuths = [0.0]
    else:
        azimuths = np.linspace(-_FRONT_ARC, _FRONT_ARC, n_train).tolist()
    if n_cameras >= 2:
        azimuths.append(np.pi)

    cameras = []
    for azimuth in azimuths:
        eye = distance * np.array([
            np.cos(_ELEVATION) * np.sin(azimuth),
            np.sin(_ELEVATION),
            np.cos(_ELEVATION) * np.cos(azimuth),
        ])
        cameras.append(Camera.look_at(eye, np.zeros(3), np.array([0.0, 1.0, 0.0]), focal, image_size, image_size))
    return cameras


def procedural_texture(canonical: np.ndarray) -> np.ndarray:
    """Low-frequency sinusoid of canonical position, values in [0.1, 0.9]."""
    return 0.5 + 0.4 * np.sin(_TEXTURE_FREQ * canonical @ _TEXTURE_DIRS.T + _TEXTURE_PHASES)


def _sample_frame(template: BodyTemplate, normals: np.ndarray, pose: Pose, rng: np.random.Generator,
                  n_gaussians: int, jitter: float, gaussian_scale: float,
                  color_noise: float, opacity_noise: float, fade: float = 0.0):
    index = rng.integers(0, template.n_vertices, size=n_gaussians)
    canonical = template.rest_vertices[index] + normals[index] * (jitter * rng.uniform(-1.0, 1.0, size=(n_gaussians, 1)))
    blended_rot, blended_t = blend_transforms(template.skin_weights[index], joint_transforms(template, pose))
    centers = np.einsum("mij,mj->mi", blended_rot, canonical) + blended_t

    clean_colors = procedural_texture(canonical)
    colors = np.clip(clean_colors + color_noise * rng.standard_normal((n_gaussians, 3)), 0.02, 0.98)
    opacities = np.clip(_CLEAN_OPACITY + opacity_noise * rng.standard_normal(n_gaussians), 0.05, 0.99)
    opacities[normals[index, 2] < _FADE_FRONT_COS] *= 1.0 - fade
    scales = gaussian_scale * np.exp(0.2 * rng.standard_normal((n_gaussians, 3)))
    rotations = rng.standard_normal((n_gaussians, 4))
    rotations *= np.sign(rotations[:, :1] + 1e-12)
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)

    noisy = GaussianCloud(centers=centers, opacities=opacities, scales=scales, rotations=rotations, colors=colors)
    clean = GaussianCloud(
        centers=centers,
        opacities=np.full(n_gaussians, _CLEAN_OPACITY),
        scales=scales,
        rotations=rotations,
        colors=clean_colors,
    )
    return noisy, clean


def make_scene(template: BodyTemplate, frames: int = 8, gaussians: int = 512, n_cameras: int = 4,
               seed: int = 7, image_size: int = 24, color_noise: float = 0.05, opacity_noise: float = 0.03,
               reference_fade: float = 0.8, jitter: float = 0.03, gaussian_scale: float = 0.08, amplitude: float = 0.5,
               t0: int = 0, num_thread: int = 1) -> SyntheticScene:
    """Sample a synthetic scene and render its ground truth with the oracle renderer.

    reference_fade scales down the opacity of back- and side-facing Gaussians
    in frame t0 only; the avatar behind the ground truth stays unfaded.
    """
    if min(frames, gaussians, n_cameras) < 1:
        raise ValueError(f"frames, gaussians and n_cameras must be positive, got {frames}, {gaussians}, {n_cameras}")
    if not 0 <= t0 < frames:
        raise ValueError(f"t0 must index a frame in [0, {frames}), got {t0}")
    if not 0.0 <= reference_fade < 1.0:
        raise ValueError(f"reference_fade must be in [0, 1), got {reference_fade}")

    poses = make_pose_sequence(template, frames, seed=seed, amplitude=amplitude)
    cameras = make_cameras(n_cameras, image_size)
    normals = vertex_normals(template.rest_vertices, template.faces)
    rng = np.random.default_rng([seed, 1])

    frame_list, avatar = [], None
    for t in range(frames):
        noisy, clean = _sample_frame(template, normals, poses[t], rng, gaussians, jitter, gaussian_scale,
                                     color_noise, opacity_noise, fade=reference_fade if t == t0 else 0.0)
        frame_list.append(GaussianFrame(timestep=t + 1, gaussians=noisy))
        if t == t0:
            avatar = clean

    binding = bind_gaussians(avatar, lbs_pose_vertices(template, poses[t0]), template, source_pose=poses[t0])

    def _render_frame(t):
        posed = repose_gaussians(avatar, binding, template, poses[t])
        return tuple(oracle_render(posed, camera) for camera in cameras)

    gt_images = []
    with ThreadPool(max(1, min(num_thread, frames))) as pool:
        for t, images in enumerate(pool.imap(_render_frame, range(frames))):
            gt_images.append(images)
            logger.debug(f"Rendered ground truth for frame {t + 1}/{frames}")
    logger.info(f"scene: {frames} frames x {gaussians} Gaussians, {n_cameras} cameras, seed={seed}")

    return SyntheticScene(
        template=template,
        poses=tuple(poses),
        frames=tuple(frame_list),
        cameras=tuple(cameras),
        gt_images=tuple(gt_images),
        seed=seed,
        avatar=avatar,
        t0=t0,
    )
