import numpy as np
import pytest
from scipy import sparse

from hgg_avatar.utils.errors import NonFiniteInput
from hgg_avatar.utils.gaussian_utils import (
    check_primitive,
    cloud_to_params,
    pack_gaussian,
    params_to_cloud,
    unpack_gaussian,
)
from hgg_avatar.utils.synth_utils import make_body
from hgg_avatar.utils.template_utils import (
    keep_top_influences,
    load_smpl_npz,
    load_template_json,
    save_template_json,
    validate_template,
)
from hgg_avatar.utils.types import BodyTemplate, GaussianPrimitive


def _triangle_template(**overrides):
    values = dict(
        rest_vertices=[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        faces=[[0, 1, 2]],
        joint_rest=[[0.0, 0.0, 0.0]],
        joint_parents=[-1],
        skin_weights=sparse.csr_matrix(np.ones((3, 1))),
    )
    values.update(overrides)
    return BodyTemplate(**values)


def test_pack_zero_vector():
    """zero logits give opacity 0.5, unit scale and mid-gray color"""
    raw = np.zeros(11)
    raw[7] = 1.0
    g = pack_gaussian(raw)
    assert g.opacity == pytest.approx(0.5)
    np.testing.assert_allclose(g.scale, np.ones(3))
    np.testing.assert_allclose(g.rotation, [1.0, 0.0, 0.0, 0.0])
    np.testing.assert_allclose(g.color, [0.5, 0.5, 0.5])
    assert check_primitive(g) == []


def test_pack_normalizes_quaternion():
    raw = np.zeros(11)
    raw[7:11] = [2.0, 0.0, 0.0, 0.0]
    g = pack_gaussian(raw)
    np.testing.assert_allclose(g.rotation, [1.0, 0.0, 0.0, 0.0])


def test_pack_rejects_non_finite():
    raw = np.zeros(11)
    raw[7] = 1.0
    raw[2] = np.nan
    with pytest.raises(NonFiniteInput):
        pack_gaussian(raw)


def test_unpack_inverts_pack(rng):
    """pack(unpack(g)) reproduces g"""
    quat = rng.normal(size=4)
    g = GaussianPrimitive(
        center=rng.normal(size=3),
        opacity=0.3,
        scale=[0.1, 0.2, 0.05],
        rotation=quat / np.linalg.norm(quat),
        color=[0.2, 0.7, 0.9],
    )
    raw, color_logits = unpack_gaussian(g)
    back = pack_gaussian(raw, color_logits)
    np.testing.assert_allclose(back.center, g.center, atol=1e-12)
    assert back.opacity == pytest.approx(g.opacity, abs=1e-12)
    np.testing.assert_allclose(back.scale, g.scale, atol=1e-12)
    np.testing.assert_allclose(back.rotation, g.rotation, atol=1e-12)
    np.testing.assert_allclose(back.color, g.color, atol=1e-12)


def test_cloud_params_are_vectorized_unpack(small_scene):
    cloud = small_scene.frames[0].gaussians
    params = cloud_to_params(cloud)
    assert params.shape == (len(cloud), 14)
    raw, color_logits = unpack_gaussian(cloud[5])
    np.testing.assert_allclose(params[5, :11], raw)
    np.testing.assert_allclose(params[5, 11:], color_logits)
    np.testing.assert_allclose(params_to_cloud(params).colors, cloud.colors, atol=1e-12)


def test_check_primitive_reports_violations():
    g = GaussianPrimitive(center=np.zeros(3), opacity=1.5, scale=[0.1, -1.0, 0.1],
                          rotation=[2.0, 0.0, 0.0, 0.0], color=[0.5, 0.5, 1.2])
    assert len(check_primitive(g)) == 4


def test_validate_generated_body():
    report = validate_template(make_body(subdivisions=2, n_joints=4))
    assert report.ok
    assert report.issues == []


def test_validate_reports_bad_face_index():
    report = validate_template(_triangle_template(faces=[[0, 1, 3]]))
    assert not report.ok
    assert any("face 0" in issue.message for issue in report.issues)


def test_validate_reports_unreferenced_vertex():
    template = _triangle_template(
        rest_vertices=[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [5.0, 5.0, 5.0]],
        skin_weights=sparse.csr_matrix(np.ones((4, 1))),
    )
    report = validate_template(template)
    assert not report.ok
    assert any("vertex 3" in issue.message for issue in report.issues)


def test_validate_reports_every_violation():
    """weights that do not sum to one and a joint cycle are both reported"""
    weights = sparse.csr_matrix(np.array([[0.5, 0.2], [1.0, 0.0], [0.0, 1.0]]))
    template = _triangle_template(joint_rest=[[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]], joint_parents=[1, 0],
                                  skin_weights=weights)
    report = validate_template(template)
    messages = " | ".join(issue.message for issue in report.issues)
    assert not report.ok
    assert "row 0" in messages
    assert "cycle" in messages


def test_keep_top_influences_renormalizes():
    dense = np.array([[0.1, 0.2, 0.3, 0.15, 0.25]])
    kept = keep_top_influences(dense, max_influences=4).toarray()
    assert (kept > 0).sum() == 4
    assert kept[0, 0] == 0.0
    assert kept.sum() == pytest.approx(1.0)


def test_template_json_round_trip(tmp_path):
    template = make_body(subdivisions=0, n_joints=2)
    path = tmp_path / "body.json"
    save_template_json(template, path)
    loaded = load_template_json(path)
    np.testing.assert_array_equal(loaded.rest_vertices, template.rest_vertices)
    np.testing.assert_array_equal(loaded.faces, template.faces)
    np.testing.assert_array_equal(loaded.joint_parents, template.joint_parents)
    np.testing.assert_allclose(loaded.dense_weights(), template.dense_weights())
    np.testing.assert_allclose(loaded.shape_dirs, template.shape_dirs)


def test_load_smpl_npz_keeps_four_influences(tmp_path, rng):
    body = make_body(subdivisions=1, n_joints=6)
    weights = rng.uniform(0.1, 1.0, size=(body.n_vertices, 6))
    weights /= weights.sum(axis=1, keepdims=True)
    kintree = np.array([[2 ** 32 - 1, 0, 1, 2, 3, 4], [0, 1, 2, 3, 4, 5]], dtype=np.uint32)
    path = tmp_path / "model.npz"
    np.savez(path, v_template=body.rest_vertices, f=body.faces, J=body.joint_rest, kintree_table=kintree,
             weights=weights, shapedirs=np.zeros((body.n_vertices, 3, 300)))

    template = load_smpl_npz(path)
    assert template.n_joints == 6
    assert template.joint_parents.tolist() == [-1, 0, 1, 2, 3, 4]
    assert template.shape_dirs.shape == (body.n_vertices, 3, 10)
    assert np.diff(template.skin_weights.indptr).max() == 4
    assert validate_template(template).ok


def test_validate_reports_parent_count_mismatch():
    template = _triangle_template(joint_rest=[[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]], joint_parents=[-1],
                                  skin_weights=sparse.csr_matrix(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])))
    report = validate_template(template)
    assert not report.ok
    assert any("1 joint parents for 2 joints" in issue.message for issue in report.issues)
