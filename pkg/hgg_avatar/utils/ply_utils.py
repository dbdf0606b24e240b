"""Gaussians as binary little-endian PLY in the layout splat viewers read.

Values follow the usual splatting convention: opacity as a logit, scales as
logs and the color as the degree-0 spherical-harmonic coefficient.
"""
import logging

import numpy as np
from plyfile import PlyData, PlyElement
from scipy.special import expit, logit

from hgg_avatar.utils.types import GaussianCloud, as_cloud

logger = logging.getLogger(__name__)

SH_C0 = 0.28209479177387814
_PROB_EPS = 1e-7

PLY_FIELDS = (
    "x", "y", "z",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "f_dc_0", "f_dc_1", "f_dc_2",
)


def export_ply(gaussians, path) -> None:
    cloud = as_cloud(gaussians)
    columns = np.concatenate([
        cloud.centers,
        logit(np.clip(cloud.opacities, _PROB_EPS, 1 - _PROB_EPS))[:, None],
        np.log(cloud.scales),
        cloud.rotations,
        (cloud.colors - 0.5) / SH_C0,
    ], axis=1)
    vertex = np.empty(len(cloud), dtype=[(name, "<f4") for name in PLY_FIELDS])
    for i, name in enumerate(PLY_FIELDS):
        vertex[name] = columns[:, i]
    PlyData([PlyElement.describe(vertex, "vertex")], text=False, byte_order="<").write(str(path))
    logger.debug(f"wrote {len(cloud)} Gaussians to {path}")


def load_ply(path) -> GaussianCloud:
    with open(path, "rb") as f:
        ply = PlyData.read(f)
    data = ply["vertex"].data
    columns = {name: np.asarray(data[name], dtype=np.float64) for name in PLY_FIELDS}
    rotations = np.stack([columns[f"rot_{i}"] for i in range(4)], axis=1)
    return GaussianCloud(
        centers=np.stack([columns["x"], columns["y"], columns["z"]], axis=1),
        opacities=expit(columns["opacity"]),
        scales=np.exp(np.stack([columns[f"scale_{i}"] for i in range(3)], axis=1)),
        rotations=rotations / np.linalg.norm(rotations, axis=1, keepdims=True),
        colors=np.clip(np.stack([columns[f"f_dc_{i}"] for i in range(3)], axis=1) * SH_C0 + 0.5, 0.0, 1.0),
    )
