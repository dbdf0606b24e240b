import json
import logging

import numpy as np
from scipy import sparse

from hgg_avatar.utils.consts import MAX_INFLUENCES, N_SHAPE_COEFFS, WEIGHT_SUM_TOL
from hgg_avatar.utils.types import BodyTemplate, ValidationReport

logger = logging.getLogger(__name__)


def _check_joint_tree(parents: np.ndarray, report: ValidationReport) -> None:
    k = len(parents)
    if k == 0:
        report.error("template has no joints")
        return
    if parents[0] != -1:
        report.error(f"joint 0 must be the root, has parent {parents[0]}")
    for j in range(1, k):
        if parents[j] < 0 or parents[j] >= k:
            report.error(f"joint {j} has invalid parent {parents[j]}")
    cyclic = False
    for j in range(k):
        seen = set()
        node = j
        while node != -1 and 0 <= node < k:
            if node in seen:
                cyclic = True
                break
            seen.add(node)
            node = parents[node]
        if cyclic:
            break
    if cyclic:
        report.error("joint tree has cycle")


def validate_template(template: BodyTemplate) -> ValidationReport:
    """Check every BodyTemplate invariant and report all violations."""
    report = ValidationReport()
    n = template.n_vertices
    k = template.n_joints

    if not np.all(np.isfinite(template.rest_vertices)):
        report.error("rest vertices contain NaN/inf")

    faces = template.faces
    if faces.size and (faces.min() < 0 or faces.max() >= n):
        bad = np.unique(np.nonzero((faces < 0) | (faces >= n))[0])
        for f in bad:
            report.error(f"face {f} has index outside [0, {n}): {faces[f].tolist()}")

    referenced = np.zeros(n, dtype=bool)
    valid = faces[(faces >= 0).all(axis=1) & (faces < n).all(axis=1)]
    referenced[valid.reshape(-1)] = True
    for v in np.nonzero(~referenced)[0]:
        report.error(f"vertex {v} is not referenced by any face")

    if len(template.joint_parents) != k:
        report.error(f"template has {len(template.joint_parents)} joint parents for {k} joints")
    _check_joint_tree(template.joint_parents, report)

    weights = template.skin_weights
    if weights.shape != (n, k):
        report.error(f"skin weights have shape {weights.shape}, expected {(n, k)}")
    else:
        if weights.nnz and weights.data.min() < 0:
            report.error("skin weights contain negative entries")
        row_sums = np.asarray(weights.sum(axis=1)).reshape(-1)
        for row in np.nonzero(np.abs(row_sums - 1.0) > WEIGHT_SUM_TOL)[0]:
            report.error(f"skin weights row {row} sums to {row_sums[row]:.6g}")
        nnz = np.diff(weights.indptr)
        for row in np.nonzero(nnz > MAX_INFLUENCES)[0]:
            report.error(f"skin weights row {row} has {nnz[row]} influences (max {MAX_INFLUENCES})")

    if template.shape_dirs is not None and template.shape_dirs.shape != (n, 3, N_SHAPE_COEFFS):
        report.error(f"shape_dirs have shape {template.shape_dirs.shape}, expected {(n, 3, N_SHAPE_COEFFS)}")

    return report


def sparse_weights_from_rows(rows, n_joints: int) -> sparse.csr_matrix:
    """Build the N x K weight matrix from per-vertex [(joint, weight), ...] lists."""
    indptr, indices, data = [0], [], []
    for row in rows:
        for joint, w in row:
            indices.append(int(joint))
            data.append(float(w))
        indptr.append(len(indices))
    return sparse.csr_matrix((data, indices, indptr), shape=(len(rows), n_joints))


def keep_top_influences(dense: np.ndarray, max_influences: int = MAX_INFLUENCES) -> sparse.csr_matrix:
    """Keep the largest influences per row and renormalize rows to sum to one."""
    dense = np.asarray(dense, dtype=np.float64)
    order = np.argsort(-dense, axis=1, kind="stable")[:, :max_influences]
    kept = np.zeros_like(dense)
    rows = np.arange(dense.shape[0])[:, None]
    kept[rows, order] = dense[rows, order]
    kept /= kept.sum(axis=1, keepdims=True)
    return sparse.csr_matrix(kept)


def template_to_dict(template: BodyTemplate) -> dict:
    weights = template.skin_weights
    rows = []
    for v in range(template.n_vertices):
        start, end = weights.indptr[v], weights.indptr[v + 1]
        rows.append([[int(j), float(w)] for j, w in zip(weights.indices[start:end], weights.data[start:end])])
    out = {
        "vertices": template.rest_vertices.tolist(),
        "faces": template.faces.tolist(),
        "joints": {"rest": template.joint_rest.tolist(), "parents": template.joint_parents.tolist()},
        "weights": rows,
    }
    if template.shape_dirs is not None:
        out["shape_dirs"] = template.shape_dirs.tolist()
    return out


def template_from_dict(data: dict) -> BodyTemplate:
    joint_rest = np.asarray(data["joints"]["rest"], dtype=np.float64)
    parents = [(-1 if p is None else p) for p in data["joints"]["parents"]]
    return BodyTemplate(
        rest_vertices=data["vertices"],
        faces=data["faces"],
        joint_rest=joint_rest,
        joint_parents=parents,
        skin_weights=sparse_weights_from_rows(data["weights"], len(joint_rest)),
        shape_dirs=data.get("shape_dirs"),
    )


def save_template_json(template: BodyTemplate, path) -> None:
    with open(path, "w") as f:
        json.dump(template_to_dict(template), f)


def load_template_json(path) -> BodyTemplate:
    with open(path) as f:
        return template_from_dict(json.load(f))


def load_smpl_npz(path, n_shape_coeffs: int = N_SHAPE_COEFFS) -> BodyTemplate:
    """Load an SMPL-format model archive.

    Expected keys: v_template, f, weights, kintree_table and either J or
    J_regressor; shapedirs is optional. Only the top four skinning influences
    per vertex are kept.
    """
    data = np.load(path, allow_pickle=False)
    vertices = np.asarray(data["v_template"], dtype=np.float64)
    if "J" in data:
        joints = np.asarray(data["J"], dtype=np.float64)
    else:
        regressor = data["J_regressor"]
        joints = np.asarray(regressor @ vertices, dtype=np.float64)
    parents = np.asarray(data["kintree_table"][0], dtype=np.int64)
    # SMPL stores the root parent as uint32 max
    parents[0] = -1
    shape_dirs = None
    if "shapedirs" in data:
        shape_dirs = np.asarray(data["shapedirs"], dtype=np.float64)[:, :, :n_shape_coeffs]
    template = BodyTemplate(
        rest_vertices=vertices,
        faces=np.asarray(data["f"], dtype=np.int64),
        joint_rest=joints,
        joint_parents=parents,
        skin_weights=keep_top_influences(data["weights"]),
        shape_dirs=shape_dirs,
    )
    logger.info(f"loaded template: {template.n_vertices} vertices, {template.n_joints} joints")
    return template
