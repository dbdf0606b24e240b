"""Software Gaussian splatting.

Gaussians are projected with the local affine approximation of the pinhole
map, sorted globally by depth and composited front to back. Each footprint is
the 2D Gaussian truncated to its 3-sigma ellipse and is only evaluated inside
that ellipse's bounding box.
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from hgg_avatar.utils.consts import COV2D_FLOOR, SIGMA_CUTOFF, TRANSMITTANCE_EPS
from hgg_avatar.utils.lbs_utils import wxyz_to_xyzw
from hgg_avatar.utils.types import Camera, GaussianCloud, GaussianPrimitive, as_cloud, frozen_array


@dataclass(frozen=True)
class ProjectedSplat:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray
    source_index: int

    @property
    def conic(self) -> np.ndarray:
        return np.linalg.inv(self.cov2d)


@dataclass(frozen=True)
class SplatBatch:
    """Projected, culled and depth-sorted splats of one view, stored column-wise."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    source: np.ndarray

    def __len__(self) -> int:
        return self.depth.shape[0]

    def __getitem__(self, i: int) -> ProjectedSplat:
        return ProjectedSplat(
            mean2d=self.mean2d[i],
            cov2d=self.cov2d[i],
            depth=float(self.depth[i]),
            opacity=float(self.opacity[i]),
            color=self.color[i],
            source_index=int(self.source[i]),
        )


@dataclass(frozen=True)
class RenderedImage:
    rgb: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        rgb = frozen_array(self.rgb)
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "alpha", frozen_array(self.alpha, shape=rgb.shape[:2]))

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @classmethod
    def blank(cls, height: int, width: int) -> "RenderedImage":
        return cls(rgb=np.zeros((height, width, 3)), alpha=np.zeros((height, width)))


def quaternion_matrices(rotations: np.ndarray) -> np.ndarray:
    """(..., 4) wxyz quaternions to (..., 3, 3) rotation matrices."""
    rotations = np.asarray(rotations, dtype=np.float64)
    flat = Rotation.from_quat(wxyz_to_xyzw(rotations.reshape(-1, 4))).as_matrix()
    return flat.reshape(rotations.shape[:-1] + (3, 3))


def covariance3d(scale, rotation) -> np.ndarray:
    """Sigma = R S S^T R^T for one Gaussian or a batch of them."""
    scale = np.asarray(scale, dtype=np.float64)
    rot = quaternion_matrices(rotation)
    rs = rot * scale[..., None, :]
    return rs @ np.swapaxes(rs, -1, -2)


def _project_arrays(cloud: GaussianCloud, camera: Camera):
    p_cam = camera.world_to_camera(cloud.centers)
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    visible = z > camera.near

    x, y, z = x[visible], y[visible], z[visible]
    mean2d = np.stack([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy], axis=1)

    jac = np.zeros((z.shape[0], 2, 3))
    jac[:, 0, 0] = camera.fx / z
    jac[:, 0, 2] = -camera.fx * x / (z * z)
    jac[:, 1, 1] = camera.fy / z
    jac[:, 1, 2] = -camera.fy * y / (z * z)

    cov3d = covariance3d(cloud.scales[visible], cloud.rotations[visible])
    t = jac @ camera.rotation
    cov2d = t @ cov3d @ np.swapaxes(t, -1, -2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, -1, -2)) + COV2D_FLOOR * np.eye(2)
    return np.nonzero(visible)[0], mean2d, cov2d, z


def project_gaussian(g: GaussianPrimitive, camera: Camera) -> Optional[ProjectedSplat]:
    """Project one Gaussian; None when it is culled by the near plane."""
    batch = project_cloud(GaussianCloud.from_primitives([g]), camera)
    return batch[0] if len(batch) else None


def project_cloud(gaussians, camera: Camera) -> SplatBatch:
    """Project every Gaussian, drop culled ones and sort by (depth, source index)."""
    cloud = as_cloud(gaussians)
    source, mean2d, cov2d, depth = _project_arrays(cloud, camera)
    order = np.lexsort((source, depth))
    cov2d = cov2d[order]
    return SplatBatch(
        mean2d=mean2d[order],
        cov2d=cov2d,
        conic=np.linalg.inv(cov2d) if len(order) else np.zeros((0, 2, 2)),
        depth=depth[order],
        opacity=cloud.opacities[source[order]],
        color=cloud.colors[source[order]],
        source=source[order],
    )


def mahalanobis2(conic: np.ndarray, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return conic[..., 0, 0] * dx * dx + 2.0 * conic[..., 0, 1] * dx * dy + conic[..., 1, 1] * dy * dy


def footprint_weight(splat: ProjectedSplat, pixel: Tuple[float, float]) -> float:
    """Truncated Gaussian falloff of one splat at pixel (x, y)."""
    dx = pixel[0] - splat.mean2d[0]
    dy = pixel[1] - splat.mean2d[1]
    m2 = float(mahalanobis2(splat.conic, np.asarray(dx), np.asarray(dy)))
    return float(np.exp(-0.5 * m2)) if m2 <= SIGMA_CUTOFF ** 2 else 0.0


def bounding_boxes(batch: SplatBatch, width: int, height: int) -> np.ndarray:
    """Inclusive pixel ranges (x0, x1, y0, y1) covering each 3-sigma ellipse, clipped to the image."""
    rx = SIGMA_CUTOFF * np.sqrt(batch.cov2d[:, 0, 0])
    ry = SIGMA_CUTOFF * np.sqrt(batch.cov2d[:, 1, 1])
    # one pixel of slack so rounding never trims a pixel the ellipse test accepts
    x0 = np.floor(batch.mean2d[:, 0] - rx) - 1
    x1 = np.ceil(batch.mean2d[:, 0] + rx) + 1
    y0 = np.floor(batch.mean2d[:, 1] - ry) - 1
    y1 = np.ceil(batch.mean2d[:, 1] + ry) + 1
    boxes = np.stack([
        np.clip(x0, 0, width - 1), np.clip(x1, -1, width - 1),
        np.clip(y0, 0, height - 1), np.clip(y1, -1, height - 1),
    ], axis=1)
    return boxes.astype(np.int64)


def footprint_weights(batch: SplatBatch, width: int, height: int) -> np.ndarray:
    """Dense (P, H*W) stack of footprint weights, filled only inside each bounding box."""
    weights = np.zeros((len(batch), height * width))
    if len(batch) == 0:
        return weights
    boxes = bounding_boxes(batch, width, height)
    nx = np.maximum(boxes[:, 1] - boxes[:, 0] + 1, 0)
    ny = np.maximum(boxes[:, 3] - boxes[:, 2] + 1, 0)
    counts = nx * ny

    splat = np.repeat(np.arange(len(batch)), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(counts.sum()) - np.repeat(starts, counts)
    px = boxes[splat, 0] + local % nx[splat]
    py = boxes[splat, 2] + local // nx[splat]

    m2 = mahalanobis2(batch.conic[splat], px - batch.mean2d[splat, 0], py - batch.mean2d[splat, 1])
    inside = m2 <= SIGMA_CUTOFF ** 2
    weights[splat[inside], py[inside] * width + px[inside]] = np.exp(-0.5 * m2[inside])
    return weights


def transmittance_before(alphas: np.ndarray) -> np.ndarray:
    """Exclusive running product of (1 - alpha) along the depth axis."""
    trans = np.ones_like(alphas)
    if alphas.shape[0] > 1:
        trans[1:] = np.cumprod(1.0 - alphas[:-1], axis=0)
    return trans


def composite_stack(opacity: np.ndarray, colors: np.ndarray, weights: np.ndarray,
                    early_out: bool = True):
    """Front-to-back compositing of depth-sorted splats over a (P, K) weight stack.

    Returns (rgb (K, 3), alpha (K,)). With early_out a splat only contributes
    to a pixel while the transmittance in front of it is at least 1e-4.
    """
    alphas = opacity[:, None] * weights
    trans = transmittance_before(alphas)
    contrib = alphas * trans
    if early_out:
        contrib = np.where(trans >= TRANSMITTANCE_EPS, contrib, 0.0)
    return contrib.T @ colors, contrib.sum(axis=0)


def composite_pixel(splats: Sequence[ProjectedSplat], weights: Sequence[float], early_out: bool = True):
    """Composite one pixel given its depth-ascending splats and their footprint weights."""
    color = np.zeros(3)
    trans = 1.0
    for splat, w in zip(splats, weights):
        a = splat.opacity * w
        color += splat.color * a * trans
        trans *= 1.0 - a
        if early_out and trans < TRANSMITTANCE_EPS:
            break
    return color, 1.0 - trans


def render(gaussians, camera: Camera) -> RenderedImage:
    """Render onto a transparent black background."""
    batch = project_cloud(gaussians, camera)
    h, w = camera.height, camera.width
    if len(batch) == 0:
        return RenderedImage.blank(h, w)
    weights = footprint_weights(batch, w, h)
    rgb, alpha = composite_stack(batch.opacity, batch.color, weights)
    return RenderedImage(
        rgb=np.clip(rgb, 0.0, 1.0).reshape(h, w, 3),
        alpha=np.clip(alpha, 0.0, 1.0).reshape(h, w),
    )
