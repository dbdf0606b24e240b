"""HGGF binary container and the scene / graph / params layouts stored in it.

Layout, all little-endian:

    magic "HGGF" | version u16 | section count u32
    per section: name length u16 | name utf-8 | type tag u8 | ndim u8 |
                 shape u32 * ndim | byte length u64 | packed data
"""
import logging
import struct
from pathlib import Path
from typing import Dict

import numpy as np
import torch
from scipy import sparse

from hgg_avatar.model.graph_blocks import GraphBlockParams
from hgg_avatar.utils.config_utils import GraphConfig
from hgg_avatar.utils.consts import HGGF_MAGIC, HGGF_VERSION
from hgg_avatar.utils.errors import CorruptContainer, DimensionMismatch
from hgg_avatar.utils.graph_utils import HumanGaussianGraph, SegmentIndex
from hgg_avatar.utils.splat_utils import RenderedImage
from hgg_avatar.utils.synth_utils import SyntheticScene
from hgg_avatar.utils.types import BodyTemplate, Camera, GaussianCloud, GaussianFrame, Pose

logger = logging.getLogger(__name__)

TYPE_TAGS = {0: ("f32", np.dtype("<f4")), 1: ("f64", np.dtype("<f8")), 2: ("i32", np.dtype("<i4"))}
_TAG_BY_NAME = {name: tag for tag, (name, _) in TYPE_TAGS.items()}

_HEADER = struct.Struct("<4sHI")
_I32 = np.iinfo(np.int32)


def _tag_for(arr: np.ndarray) -> int:
    if arr.dtype == np.float32:
        return _TAG_BY_NAME["f32"]
    if arr.dtype.kind == "f":
        return _TAG_BY_NAME["f64"]
    if arr.dtype.kind in "iub":
        return _TAG_BY_NAME["i32"]
    raise TypeError(f"unsupported section dtype {arr.dtype}")


def encode_container(sections: Dict[str, np.ndarray]) -> bytes:
    out = [_HEADER.pack(HGGF_MAGIC, HGGF_VERSION, len(sections))]
    for name, value in sections.items():
        arr = np.asarray(value)
        tag = _tag_for(arr)
        if tag == _TAG_BY_NAME["i32"] and arr.size and (arr.min() < _I32.min or arr.max() > _I32.max):
            raise OverflowError(f"section {name!r} does not fit in i32")
        data = np.ascontiguousarray(arr, dtype=TYPE_TAGS[tag][1]).tobytes()
        encoded = name.encode("utf-8")
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<BB", tag, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(struct.pack("<Q", len(data)))
        out.append(data)
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CorruptContainer(f"truncated container while reading {what} at byte {self.pos}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def decode_container(blob: bytes) -> Dict[str, np.ndarray]:
    reader = _Reader(blob)
    magic, version, count = reader.unpack(_HEADER.format, "header")
    if magic != HGGF_MAGIC:
        raise CorruptContainer(f"bad magic {magic!r}")
    if version != HGGF_VERSION:
        raise CorruptContainer(f"unsupported container version {version}")

    sections = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "section name length")
        try:
            name = reader.take(name_len, "section name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptContainer(f"section name is not utf-8: {e}") from e
        if name in sections:
            raise CorruptContainer(f"duplicate section {name!r}")
        tag, ndim = reader.unpack("<BB", f"type of {name!r}")
        if tag not in TYPE_TAGS:
            raise CorruptContainer(f"unknown type tag {tag} in section {name!r}")
        shape = reader.unpack(f"<{ndim}I", f"shape of {name!r}")
        (nbytes,) = reader.unpack("<Q", f"length of {name!r}")
        dtype = TYPE_TAGS[tag][1]
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != expected:
            raise CorruptContainer(f"section {name!r}: {nbytes} bytes declared, shape {shape} needs {expected}")
        data = reader.take(nbytes, f"data of {name!r}")
        sections[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()

    if reader.pos != len(blob):
        raise CorruptContainer(f"{len(blob) - reader.pos} trailing bytes after the last section")
    return sections


def write_container(path, sections: Dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_container(sections))


def read_container(path) -> Dict[str, np.ndarray]:
    return decode_container(Path(path).read_bytes())


def _require(sections: dict, *names: str) -> None:
    missing = [n for n in names if n not in sections]
    if missing:
        raise CorruptContainer(f"missing sections: {missing}")


# -- template, poses, frames, cameras -------------------------------------------------

def _template_sections(template: BodyTemplate) -> dict:
    weights = template.skin_weights
    out = {
        "template/vertices": template.rest_vertices,
        "template/faces": template.faces,
        "template/joint_rest": template.joint_rest,
        "template/parents": template.joint_parents,
        "template/weights_indptr": weights.indptr,
        "template/weights_indices": weights.indices,
        "template/weights_data": weights.data,
    }
    if template.shape_dirs is not None:
        out["template/shape_dirs"] = template.shape_dirs
    return out


def _template_from(sections: dict) -> BodyTemplate:
    _require(sections, "template/vertices", "template/faces", "template/joint_rest", "template/parents",
             "template/weights_indptr", "template/weights_indices", "template/weights_data")
    n_vertices = sections["template/vertices"].shape[0]
    n_joints = sections["template/joint_rest"].shape[0]
    weights = sparse.csr_matrix(
        (sections["template/weights_data"], sections["template/weights_indices"], sections["template/weights_indptr"]),
        shape=(n_vertices, n_joints),
    )
    return BodyTemplate(
        rest_vertices=sections["template/vertices"],
        faces=sections["template/faces"],
        joint_rest=sections["template/joint_rest"],
        joint_parents=sections["template/parents"],
        skin_weights=weights,
        shape_dirs=sections.get("template/shape_dirs"),
    )


def _pose_sections(poses) -> dict:
    return {
        "poses/theta": np.stack([p.theta for p in poses]),
        "poses/beta": np.stack([p.beta for p in poses]),
        "poses/root": np.stack([p.root_translation for p in poses]),
    }


def _poses_from(sections: dict) -> tuple:
    _require(sections, "poses/theta", "poses/beta", "poses/root")
    return tuple(Pose(theta=theta, beta=beta, root_translation=root)
                 for theta, beta, root in zip(sections["poses/theta"], sections["poses/beta"], sections["poses/root"]))


def _cloud_sections(prefix: str, clouds) -> dict:
    return {
        f"{prefix}/centers": np.stack([c.centers for c in clouds]),
        f"{prefix}/opacities": np.stack([c.opacities for c in clouds]),
        f"{prefix}/scales": np.stack([c.scales for c in clouds]),
        f"{prefix}/rotations": np.stack([c.rotations for c in clouds]),
        f"{prefix}/colors": np.stack([c.colors for c in clouds]),
    }


def _clouds_from(sections: dict, prefix: str) -> list:
    keys = [f"{prefix}/{k}" for k in ("centers", "opacities", "scales", "rotations", "colors")]
    _require(sections, *keys)
    return [GaussianCloud(*fields) for fields in zip(*(sections[k] for k in keys))]


def _frame_sections(frames) -> dict:
    out = _cloud_sections("frames", [f.gaussians for f in frames])
    out["frames/timestep"] = np.array([f.timestep for f in frames], dtype=np.int64)
    return out


def _frames_from(sections: dict) -> tuple:
    _require(sections, "frames/timestep")
    clouds = _clouds_from(sections, "frames")
    return tuple(GaussianFrame(timestep=int(t), gaussians=c) for t, c in zip(sections["frames/timestep"], clouds))


def _camera_sections(cameras) -> dict:
    return {
        "cameras/intrinsics": np.array([[c.fx, c.fy, c.cx, c.cy, c.near] for c in cameras]),
        "cameras/rotation": np.stack([c.rotation for c in cameras]),
        "cameras/translation": np.stack([c.translation for c in cameras]),
        "cameras/size": np.array([[c.width, c.height] for c in cameras], dtype=np.int64),
    }


def _cameras_from(sections: dict) -> tuple:
    _require(sections, "cameras/intrinsics", "cameras/rotation", "cameras/translation", "cameras/size")
    return tuple(
        Camera(fx=k[0], fy=k[1], cx=k[2], cy=k[3], near=k[4], rotation=r, translation=t, width=s[0], height=s[1])
        for k, r, t, s in zip(sections["cameras/intrinsics"], sections["cameras/rotation"],
                              sections["cameras/translation"], sections["cameras/size"])
    )


# -- scenes -----------------------------------------------------------------------------

def scene_sections(scene: SyntheticScene) -> dict:
    sizes = {(c.height, c.width) for c in scene.cameras}
    if len(sizes) != 1:
        raise DimensionMismatch(f"cameras of one scene must share an image size, got {sorted(sizes)}")
    out = {"scene/meta": np.array([scene.seed, scene.t0], dtype=np.int64)}
    out.update(_template_sections(scene.template))
    out.update(_pose_sections(scene.poses))
    out.update(_frame_sections(scene.frames))
    out.update(_camera_sections(scene.cameras))
    out.update(_cloud_sections("avatar", [scene.avatar]))
    out["gt/rgb"] = np.stack([np.stack([img.rgb for img in row]) for row in scene.gt_images])
    out["gt/alpha"] = np.stack([np.stack([img.alpha for img in row]) for row in scene.gt_images])
    return out


def scene_from_sections(sections: dict) -> SyntheticScene:
    _require(sections, "scene/meta", "gt/rgb", "gt/alpha")
    seed, t0 = (int(x) for x in sections["scene/meta"])
    frames = _frames_from(sections)
    poses = _poses_from(sections)
    cameras = _cameras_from(sections)
    rgb, alpha = sections["gt/rgb"], sections["gt/alpha"]
    if len(poses) != len(frames) or rgb.shape[:2] != (len(frames), len(cameras)):
        raise CorruptContainer(f"{len(frames)} frames, {len(poses)} poses, {len(cameras)} cameras "
                               f"but ground truth of shape {rgb.shape[:2]}")
    gt_images = tuple(
        tuple(RenderedImage(rgb=rgb[t, c], alpha=alpha[t, c]) for c in range(len(cameras)))
        for t in range(len(frames))
    )
    return SyntheticScene(
        template=_template_from(sections),
        poses=poses,
        frames=frames,
        cameras=cameras,
        gt_images=gt_images,
        seed=seed,
        avatar=_clouds_from(sections, "avatar")[0],
        t0=t0,
    )


def save_scene(scene: SyntheticScene, path) -> None:
    write_container(path, scene_sections(scene))
    logger.info(f"wrote scene ({scene.n_frames} frames, {len(scene.cameras)} cameras) to {path}")


def load_scene(path) -> SyntheticScene:
    return scene_from_sections(read_container(path))


# -- graphs -----------------------------------------------------------------------------

def save_graph(graph: HumanGaussianGraph, path) -> None:
    partitions = graph.n_frames * graph.n_gaussians
    sections = {
        "graph/meta": np.array([graph.d0, graph.n_frames, graph.n_gaussians, graph.n_vertices, partitions],
                               dtype=np.int64),
        "graph/evg": graph.evg,
        "graph/evv_offsets": graph.evv.offsets,
        "graph/evv_values": graph.evv.values,
        "graph/groups_offsets": graph.groups.offsets,
        "graph/groups_values": graph.groups.values,
    }
    sections.update(_template_sections(graph.template))
    sections.update(_pose_sections(graph.poses))
    sections.update(_frame_sections(graph.frames))
    write_container(path, sections)


def load_graph(path) -> HumanGaussianGraph:
    sections = read_container(path)
    _require(sections, "graph/meta", "graph/evg", "graph/evv_offsets", "graph/evv_values",
             "graph/groups_offsets", "graph/groups_values")
    d0, n_frames, n_gaussians, n_vertices, partitions = (int(x) for x in sections["graph/meta"])
    evg = sections["graph/evg"].astype(np.int64)
    if evg.shape != (n_frames, n_gaussians) or partitions != n_frames * n_gaussians:
        raise CorruptContainer(f"header says {n_frames} x {n_gaussians} ({partitions} partitions), "
                               f"edges have shape {evg.shape}")
    groups_values = sections["graph/groups_values"].reshape(-1, 2)
    graph = HumanGaussianGraph(
        frames=_frames_from(sections),
        poses=_poses_from(sections),
        template=_template_from(sections),
        evg=evg,
        evv=SegmentIndex(sections["graph/evv_offsets"], sections["graph/evv_values"]),
        d0=d0,
        groups=SegmentIndex(sections["graph/groups_offsets"], groups_values),
    )
    if graph.n_vertices != n_vertices:
        raise CorruptContainer(f"header says {n_vertices} vertices, template has {graph.n_vertices}")
    return graph


# -- trained parameters -------------------------------------------------------------------

_GRAPH_INT_KEYS = ("d0", "n_layers", "token_dim", "n_heads", "share_value_projection", "use_intra", "use_inter",
                   "zero_init_residual", "seed", "token_residual")


def save_params(params: GraphBlockParams, path, t0: int = 0, refine: bool = True) -> None:
    """Store GraphBlockParams with the config needed to rebuild them."""
    config = params.config
    sections = {
        "params/meta": np.array([params.n_vertices, t0, int(refine)], dtype=np.int64),
        "params/config_int": np.array([int(getattr(config, k)) for k in _GRAPH_INT_KEYS], dtype=np.int64),
        "params/config_float": np.array([config.query_init_std], dtype=np.float64),
    }
    for name, tensor in params.state_dict().items():
        sections[f"state/{name}"] = tensor.detach().cpu().numpy()
    write_container(path, sections)


def load_params(path):
    """Returns (GraphBlockParams, t0, refine)."""
    sections = read_container(path)
    _require(sections, "params/meta", "params/config_int", "params/config_float")
    n_vertices, t0, refine = (int(x) for x in sections["params/meta"])
    ints = dict(zip(_GRAPH_INT_KEYS, (int(x) for x in sections["params/config_int"])))
    # files written before token_residual existed carry one key less
    for key in ("share_value_projection", "use_intra", "use_inter", "zero_init_residual", "token_residual"):
        if key in ints:
            ints[key] = bool(ints[key])
    config = GraphConfig(query_init_std=float(sections["params/config_float"][0]), **ints)

    state = {k[len("state/"):]: torch.from_numpy(v) for k, v in sections.items() if k.startswith("state/")}
    dtype = state["queries"].dtype if "queries" in state else torch.float64
    params = GraphBlockParams(n_vertices, config, dtype=dtype)
    try:
        params.load_state_dict(state)
    except RuntimeError as e:
        raise CorruptContainer(f"parameter sections do not match the stored config: {e}") from e
    return params, t0, bool(refine)
