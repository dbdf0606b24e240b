import struct

import numpy as np
import pytest
import torch

from hgg_avatar.model.graph_blocks import GraphBlockParams
from hgg_avatar.utils.config_utils import GraphConfig
from hgg_avatar.utils.container_utils import (
    decode_container,
    encode_container,
    load_graph,
    load_params,
    load_scene,
    read_container,
    save_graph,
    save_params,
    save_scene,
    write_container,
)
from hgg_avatar.utils.errors import CorruptContainer
from hgg_avatar.utils.graph_utils import build_graph

_HEADER_SIZE = 10


def _section_bytes(name, value):
    return encode_container({name: value})[_HEADER_SIZE:]


def test_section_types_round_trip():
    sections = {
        "f64": np.arange(6, dtype=np.float64).reshape(2, 3) / 7.0,
        "f32": np.linspace(0, 1, 5, dtype=np.float32),
        "ints": np.array([[-3, 4], [2 ** 31 - 1, 0]], dtype=np.int64),
        "flags": np.array([True, False]),
        "scalar": np.array(2.5),
        "empty": np.zeros((0, 3)),
        "naïve/name": np.ones(1),
    }
    back = decode_container(encode_container(sections))
    assert list(back) == list(sections)
    np.testing.assert_array_equal(back["f64"], sections["f64"])
    assert back["f32"].dtype == np.float32
    assert back["ints"].dtype == np.int32
    np.testing.assert_array_equal(back["ints"], sections["ints"])
    assert back["flags"].tolist() == [1, 0]
    assert back["scalar"].shape == ()
    assert back["empty"].shape == (0, 3)


def test_header_layout():
    blob = encode_container({"a": np.zeros(2)})
    assert blob[:4] == b"HGGF"
    assert struct.unpack("<HI", blob[4:10]) == (1, 1)
    assert len(blob) == _HEADER_SIZE + 2 + 1 + 2 + 4 + 8 + 16


def test_integer_overflow():
    with pytest.raises(OverflowError):
        encode_container({"big": np.array([2 ** 31])})


def test_unsupported_dtype():
    with pytest.raises(TypeError):
        encode_container({"text": np.array(["a"])})


def test_bad_magic():
    blob = encode_container({"a": np.zeros(2)})
    with pytest.raises(CorruptContainer, match="magic"):
        decode_container(b"HGGX" + blob[4:])


def test_bad_version():
    blob = encode_container({"a": np.zeros(2)})
    with pytest.raises(CorruptContainer, match="version"):
        decode_container(blob[:4] + struct.pack("<H", 9) + blob[6:])


@pytest.mark.parametrize("cut", [3, 9, 12, 20, -1])
def test_truncated(cut):
    blob = encode_container({"a": np.zeros(2)})
    with pytest.raises(CorruptContainer):
        decode_container(blob[:cut])


def test_trailing_bytes():
    blob = encode_container({"a": np.zeros(2)})
    with pytest.raises(CorruptContainer, match="trailing"):
        decode_container(blob + b"\x00")


def test_unknown_type_tag():
    blob = bytearray(encode_container({"a": np.zeros(2)}))
    blob[_HEADER_SIZE + 2 + 1] = 9
    with pytest.raises(CorruptContainer, match="type tag"):
        decode_container(bytes(blob))


def test_declared_length_mismatch():
    """an f64 payload relabelled as f32 needs half the bytes it declares"""
    blob = bytearray(encode_container({"a": np.zeros(2)}))
    blob[_HEADER_SIZE + 2 + 1] = 0
    with pytest.raises(CorruptContainer, match="bytes declared"):
        decode_container(bytes(blob))


def test_duplicate_section():
    section = _section_bytes("a", np.zeros(2))
    blob = struct.pack("<4sHI", b"HGGF", 1, 2) + section + section
    with pytest.raises(CorruptContainer, match="duplicate"):
        decode_container(blob)


def test_file_round_trip(tmp_path):
    path = tmp_path / "x.hggf"
    write_container(path, {"v": np.arange(3.0)})
    np.testing.assert_array_equal(read_container(path)["v"], [0.0, 1.0, 2.0])


def test_scene_round_trip(small_scene, tmp_path):
    path = tmp_path / "scene.hggf"
    save_scene(small_scene, path)
    scene = load_scene(path)

    assert scene.seed == small_scene.seed and scene.t0 == small_scene.t0
    np.testing.assert_array_equal(scene.template.rest_vertices, small_scene.template.rest_vertices)
    np.testing.assert_array_equal(scene.template.faces, small_scene.template.faces)
    np.testing.assert_allclose(scene.template.dense_weights(), small_scene.template.dense_weights())
    for a, b in zip(scene.frames, small_scene.frames):
        assert a.timestep == b.timestep
        np.testing.assert_array_equal(a.gaussians.centers, b.gaussians.centers)
        np.testing.assert_array_equal(a.gaussians.rotations, b.gaussians.rotations)
    for a, b in zip(scene.poses, small_scene.poses):
        np.testing.assert_array_equal(a.theta, b.theta)
    for a, b in zip(scene.cameras, small_scene.cameras):
        np.testing.assert_array_equal(a.rotation, b.rotation)
        assert (a.fx, a.cx, a.width) == (b.fx, b.cx, b.width)
    np.testing.assert_array_equal(scene.gt_images[2][1].rgb, small_scene.gt_images[2][1].rgb)
    np.testing.assert_array_equal(scene.avatar.colors, small_scene.avatar.colors)


def test_scene_missing_section(small_scene, tmp_path):
    path = tmp_path / "scene.hggf"
    save_scene(small_scene, path)
    sections = read_container(path)
    del sections["gt/rgb"]
    write_container(path, sections)
    with pytest.raises(CorruptContainer, match="missing"):
        load_scene(path)


def test_graph_round_trip(small_scene, tmp_path):
    graph = build_graph(small_scene.frames, small_scene.poses, small_scene.template, d0=2)
    path = tmp_path / "graph.hggf"
    save_graph(graph, path)
    back = load_graph(path)
    assert back.d0 == 2
    np.testing.assert_array_equal(back.evg, graph.evg)
    assert back.evv.to_lists() == graph.evv.to_lists()
    assert back.groups.to_lists() == graph.groups.to_lists()
    assert back.n_frames == graph.n_frames


def test_graph_header_mismatch(small_scene, tmp_path):
    graph = build_graph(small_scene.frames, small_scene.poses, small_scene.template, d0=1)
    path = tmp_path / "graph.hggf"
    save_graph(graph, path)
    sections = read_container(path)
    sections["graph/meta"][4] += 1
    write_container(path, sections)
    with pytest.raises(CorruptContainer):
        load_graph(path)


def test_params_round_trip(tmp_path):
    params = GraphBlockParams(12, GraphConfig(token_dim=8, n_layers=2, n_heads=2, seed=4, use_inter=False,
                                              token_residual=True))
    with torch.no_grad():
        params.decoder.bias.fill_(0.25)
    path = tmp_path / "params.hggf"
    save_params(params, path, t0=2, refine=False)

    back, t0, refine = load_params(path)
    assert (t0, refine) == (2, False)
    assert back.config == params.config
    for (name, a), (_, b) in zip(back.state_dict().items(), params.state_dict().items()):
        assert torch.equal(a, b), name


def test_params_float32_round_trip(tmp_path):
    params = GraphBlockParams(5, GraphConfig(token_dim=4, n_layers=1), dtype=torch.float32)
    path = tmp_path / "params.hggf"
    save_params(params, path)
    back, _, _ = load_params(path)
    assert back.dtype == torch.float32


def test_params_config_mismatch(tmp_path):
    params = GraphBlockParams(5, GraphConfig(token_dim=4, n_layers=1))
    path = tmp_path / "params.hggf"
    save_params(params, path)
    sections = read_container(path)
    sections["params/config_int"][1] = 2
    write_container(path, sections)
    with pytest.raises(CorruptContainer, match="do not match"):
        load_params(path)


def test_params_without_token_residual_key_load_with_default(tmp_path):
    params = GraphBlockParams(5, GraphConfig(token_dim=4, n_layers=1))
    path = tmp_path / "params.hggf"
    save_params(params, path)
    sections = read_container(path)
    sections["params/config_int"] = sections["params/config_int"][:-1]
    write_container(path, sections)
    back, _, _ = load_params(path)
    assert back.config.token_residual is False
