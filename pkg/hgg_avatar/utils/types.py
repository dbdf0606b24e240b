"""Domain types shared by every module.

Array-valued types are frozen dataclasses holding read-only numpy arrays, so
instances can be shared between worker threads without copying. Report types
are pydantic models like the rest of the configuration surface.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, List, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, computed_field
from scipy import sparse

from hgg_avatar.utils.consts import N_SHAPE_COEFFS
from hgg_avatar.utils.errors import NonFiniteInput


def frozen_array(value, dtype=np.float64, shape: Optional[tuple] = None) -> np.ndarray:
    arr = np.array(value, dtype=dtype, copy=True)
    if shape is not None:
        arr = arr.reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GaussianPrimitive:
    """One splat: center, opacity, anisotropic scale, unit quaternion (w, x, y, z), RGB color."""

    center: np.ndarray
    opacity: float
    scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", frozen_array(self.center, shape=(3,)))
        object.__setattr__(self, "opacity", float(self.opacity))
        object.__setattr__(self, "scale", frozen_array(self.scale, shape=(3,)))
        object.__setattr__(self, "rotation", frozen_array(self.rotation, shape=(4,)))
        object.__setattr__(self, "color", frozen_array(self.color, shape=(3,)))


@dataclass(frozen=True)
class GaussianCloud:
    """An ordered set of M Gaussians stored column-wise."""

    centers: np.ndarray
    opacities: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        n = len(np.asarray(self.centers).reshape(-1, 3))
        object.__setattr__(self, "centers", frozen_array(self.centers, shape=(n, 3)))
        object.__setattr__(self, "opacities", frozen_array(self.opacities, shape=(n,)))
        object.__setattr__(self, "scales", frozen_array(self.scales, shape=(n, 3)))
        object.__setattr__(self, "rotations", frozen_array(self.rotations, shape=(n, 4)))
        object.__setattr__(self, "colors", frozen_array(self.colors, shape=(n, 3)))

    def __len__(self) -> int:
        return self.centers.shape[0]

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            center=self.centers[i],
            opacity=self.opacities[i],
            scale=self.scales[i],
            rotation=self.rotations[i],
            color=self.colors[i],
        )

    def __iter__(self) -> Iterator[GaussianPrimitive]:
        for i in range(len(self)):
            yield self[i]

    def take(self, index) -> "GaussianCloud":
        index = np.asarray(index)
        return GaussianCloud(
            centers=self.centers[index],
            opacities=self.opacities[index],
            scales=self.scales[index],
            rotations=self.rotations[index],
            colors=self.colors[index],
        )

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)))

    @classmethod
    def from_primitives(cls, gaussians: Sequence[GaussianPrimitive]) -> "GaussianCloud":
        if len(gaussians) == 0:
            return cls.empty()
        return cls(
            centers=np.stack([g.center for g in gaussians]),
            opacities=np.array([g.opacity for g in gaussians]),
            scales=np.stack([g.scale for g in gaussians]),
            rotations=np.stack([g.rotation for g in gaussians]),
            colors=np.stack([g.color for g in gaussians]),
        )


@dataclass(frozen=True)
class GaussianFrame:
    """Gaussians produced for one video frame; timestep is the 1-based frame label."""

    timestep: int
    gaussians: GaussianCloud

    def __len__(self) -> int:
        return len(self.gaussians)


def as_cloud(gaussians) -> GaussianCloud:
    """Accept a GaussianCloud, a GaussianFrame or a sequence of primitives."""
    if isinstance(gaussians, GaussianCloud):
        return gaussians
    if isinstance(gaussians, GaussianFrame):
        return gaussians.gaussians
    return GaussianCloud.from_primitives(list(gaussians))


@dataclass(frozen=True)
class BodyTemplate:
    """Skinned body template.

    joint_parents holds -1 for the root. skin_weights is an N x K sparse matrix
    with at most four nonzeros per row.
    """

    rest_vertices: np.ndarray
    faces: np.ndarray
    joint_rest: np.ndarray
    joint_parents: np.ndarray
    skin_weights: sparse.csr_matrix
    shape_dirs: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "rest_vertices", frozen_array(self.rest_vertices).reshape(-1, 3))
        object.__setattr__(self, "faces", frozen_array(self.faces, dtype=np.int64).reshape(-1, 3))
        object.__setattr__(self, "joint_rest", frozen_array(self.joint_rest).reshape(-1, 3))
        object.__setattr__(self, "joint_parents", frozen_array(self.joint_parents, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "skin_weights", sparse.csr_matrix(self.skin_weights, dtype=np.float64))
        if self.shape_dirs is not None:
            dirs = frozen_array(self.shape_dirs)
            object.__setattr__(self, "shape_dirs", dirs.reshape(-1, 3, N_SHAPE_COEFFS))

    @property
    def n_vertices(self) -> int:
        return self.rest_vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.joint_rest.shape[0]

    def dense_weights(self) -> np.ndarray:
        return self.skin_weights.toarray()


@dataclass(frozen=True)
class Pose:
    """Axis-angle joint rotations (K x 3), shape coefficients and root translation."""

    theta: np.ndarray
    beta: np.ndarray = field(default_factory=lambda: np.zeros(N_SHAPE_COEFFS))
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "theta", frozen_array(self.theta).reshape(-1, 3))
        object.__setattr__(self, "beta", frozen_array(self.beta, shape=(N_SHAPE_COEFFS,)))
        object.__setattr__(self, "root_translation", frozen_array(self.root_translation, shape=(3,)))
        for name in ("theta", "beta", "root_translation"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFiniteInput(f"pose {name} contains NaN/inf")

    @property
    def n_joints(self) -> int:
        return self.theta.shape[0]

    @property
    def has_shape(self) -> bool:
        return bool(np.any(self.beta != 0.0))

    @classmethod
    def identity(cls, n_joints: int) -> "Pose":
        return cls(theta=np.zeros((n_joints, 3)))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. rotation/translation map world points into camera space (z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not self.near > 0:
            raise ValueError(f"near must be positive, got {self.near}")
        object.__setattr__(self, "rotation", frozen_array(self.rotation, shape=(3, 3)))
        object.__setattr__(self, "translation", frozen_array(self.translation, shape=(3,)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    @classmethod
    def look_at(cls, eye, target, up, focal: float, width: int, height: int, near: float = 0.01) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward])
        return cls(
            fx=focal,
            fy=focal,
            cx=(width - 1) / 2.0,
            cy=(height - 1) / 2.0,
            rotation=rotation,
            translation=-rotation @ eye,
            width=width,
            height=height,
            near=near,
        )


class Issue(BaseModel):
    severity: Literal["error", "warning"] = Field(description="error issues make the report fail")
    message: str = Field(description="human readable description of the violation")


class ValidationReport(BaseModel):
    """Outcome of a structural validation; violations are collected, never raised."""

    issues: List[Issue] = Field(default_factory=list)

    @computed_field
    @property
    def ok(self) -> bool:
        return not any(issue.severity == "error" for issue in self.issues)

    def error(self, message: str) -> None:
        self.issues.append(Issue(severity="error", message=message))

    def warning(self, message: str) -> None:
        self.issues.append(Issue(severity="warning", message=message))
