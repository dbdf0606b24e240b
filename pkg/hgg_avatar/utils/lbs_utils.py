"""Linear blend skinning for template vertices and bound Gaussians."""
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.spatial.transform import Rotation

from hgg_avatar.utils.errors import DimensionMismatch, EmptyFrame
from hgg_avatar.utils.types import BodyTemplate, GaussianCloud, Pose, as_cloud, frozen_array


@dataclass(frozen=True)
class JointTransforms:
    """Per-joint rigid transforms x -> R_k x + t_k from canonical to posed space."""

    rotations: np.ndarray
    translations: np.ndarray

    def __len__(self) -> int:
        return self.rotations.shape[0]

    def apply(self, joint: int, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotations[joint].T + self.translations[joint]


@dataclass(frozen=True)
class GaussianBinding:
    """Nearest-vertex binding of M Gaussians to a template.

    weights holds the skin-weight rows inherited from the bound vertices
    (M x K sparse). source_pose None means the rest pose.
    """

    vertex_index: np.ndarray
    weights: sparse.csr_matrix
    source_pose: Optional[Pose] = None

    def __len__(self) -> int:
        return self.vertex_index.shape[0]

    def with_source_pose(self, pose: Optional[Pose]) -> "GaussianBinding":
        return replace(self, source_pose=pose)


def _topological_order(parents: np.ndarray) -> list:
    children = {j: [] for j in range(len(parents))}
    roots = []
    for j, p in enumerate(parents):
        if p < 0:
            roots.append(j)
        else:
            children[int(p)].append(j)
    order, stack = [], list(reversed(roots))
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    return order


def joint_transforms(template: BodyTemplate, pose: Pose) -> JointTransforms:
    """Forward kinematics: compose local rotations along the parent chain."""
    k = template.n_joints
    if pose.n_joints != k:
        raise DimensionMismatch(f"pose has {pose.n_joints} joints, template has {k}")
    local = Rotation.from_rotvec(np.array(pose.theta)).as_matrix()
    rest = template.joint_rest
    parents = template.joint_parents

    global_rot = np.empty((k, 3, 3))
    global_pos = np.empty((k, 3))
    for j in _topological_order(parents):
        p = parents[j]
        if p < 0:
            global_rot[j] = local[j]
            global_pos[j] = rest[j]
        else:
            global_rot[j] = global_rot[p] @ local[j]
            global_pos[j] = global_rot[p] @ (rest[j] - rest[p]) + global_pos[p]

    translations = global_pos - np.einsum("kij,kj->ki", global_rot, rest) + pose.root_translation
    return JointTransforms(rotations=frozen_array(global_rot), translations=frozen_array(translations))


def blend_transforms(weights: sparse.csr_matrix, transforms: JointTransforms):
    """Weight-blended affine transforms, one per weight row: (A (R,3,3), b (R,3))."""
    k = len(transforms)
    if weights.shape[1] != k:
        raise DimensionMismatch(f"weights cover {weights.shape[1]} joints, transforms have {k}")
    blended_rot = np.asarray(weights @ transforms.rotations.reshape(k, 9)).reshape(-1, 3, 3)
    blended_t = np.asarray(weights @ transforms.translations)
    return blended_rot, blended_t


def shaped_vertices(template: BodyTemplate, pose: Pose) -> np.ndarray:
    if template.shape_dirs is None:
        if pose.has_shape:
            raise DimensionMismatch("pose carries shape coefficients but the template has no shape_dirs")
        return np.array(template.rest_vertices)
    return template.rest_vertices + template.shape_dirs @ pose.beta


def lbs_pose_vertices(template: BodyTemplate, pose: Pose) -> np.ndarray:
    """Pose every template vertex: sum_k w_k (R_k v + t_k)."""
    transforms = joint_transforms(template, pose)
    blended_rot, blended_t = blend_transforms(template.skin_weights, transforms)
    vertices = shaped_vertices(template, pose)
    return np.einsum("nij,nj->ni", blended_rot, vertices) + blended_t


def wxyz_to_xyzw(q: np.ndarray) -> np.ndarray:
    return np.asarray(q)[..., [1, 2, 3, 0]]


def xyzw_to_wxyz(q: np.ndarray) -> np.ndarray:
    return np.asarray(q)[..., [3, 0, 1, 2]]


def bind_gaussians(gaussians, posed_vertices: np.ndarray, template: BodyTemplate,
                   source_pose: Optional[Pose] = None) -> GaussianBinding:
    """Bind each Gaussian to its nearest posed vertex and inherit that vertex's weights.

    posed_vertices must be the template posed by source_pose (rest vertices when
    source_pose is None).
    """
    from hgg_avatar.utils.graph_utils import nearest_vertex_assign

    cloud = as_cloud(gaussians)
    if len(cloud) == 0:
        raise EmptyFrame("cannot bind an empty set of Gaussians")
    posed_vertices = np.asarray(posed_vertices, dtype=np.float64)
    if posed_vertices.shape[0] != template.n_vertices:
        raise DimensionMismatch(
            f"{posed_vertices.shape[0]} posed vertices for a template with {template.n_vertices}")

    index = nearest_vertex_assign(cloud.centers, posed_vertices)
    weights = template.skin_weights[index]
    return GaussianBinding(
        vertex_index=frozen_array(index, dtype=np.int64),
        weights=weights,
        source_pose=source_pose,
    )


def repose_gaussians(gaussians, binding: GaussianBinding, template: BodyTemplate, pose_dst: Pose) -> GaussianCloud:
    """Move bound Gaussians from the binding's source pose into pose_dst.

    Centers follow the blended affine transforms; orientations are composed
    with the rotation extracted from the blended matrices. Opacity, scale and
    color are pose invariant.
    """
    cloud = as_cloud(gaussians)
    if len(cloud) != len(binding):
        raise DimensionMismatch(f"{len(cloud)} Gaussians for a binding of {len(binding)}")
    pose_src = binding.source_pose if binding.source_pose is not None else Pose.identity(template.n_joints)

    src_rot, src_t = blend_transforms(binding.weights, joint_transforms(template, pose_src))
    dst_rot, dst_t = blend_transforms(binding.weights, joint_transforms(template, pose_dst))

    canonical = np.linalg.solve(src_rot, (cloud.centers - src_t)[..., None])[..., 0]
    centers = np.einsum("mij,mj->mi", dst_rot, canonical) + dst_t

    relative = Rotation.from_matrix(dst_rot) * Rotation.from_matrix(src_rot).inv()
    composed = relative * Rotation.from_quat(wxyz_to_xyzw(cloud.rotations))
    rotations = xyzw_to_wxyz(composed.as_quat())
    rotations /= np.linalg.norm(rotations, axis=-1, keepdims=True)

    return GaussianCloud(
        centers=centers,
        opacities=cloud.opacities,
        scales=cloud.scales,
        rotations=rotations,
        colors=cloud.colors,
    )
