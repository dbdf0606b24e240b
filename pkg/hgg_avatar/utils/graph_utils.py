"""Human Gaussian Graph construction.

First-layer nodes are the Gaussians of every frame, second-layer nodes are the
template vertices. Gaussian-to-vertex edges come from a nearest-vertex query
against the template posed into each frame; vertex-to-vertex edges join
vertices within d0 face hops.
"""
import logging
from dataclasses import dataclass
from multiprocessing.pool import ThreadPool
from typing import Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from hgg_avatar.utils.errors import DimensionMismatch, EmptyVertexSet
from hgg_avatar.utils.lbs_utils import lbs_pose_vertices
from hgg_avatar.utils.types import BodyTemplate, GaussianFrame, Pose, frozen_array

logger = logging.getLogger(__name__)

_CANDIDATES = 4


@dataclass(frozen=True)
class SegmentIndex:
    """Ragged per-vertex lists stored as offsets into one values array."""

    offsets: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "offsets", frozen_array(self.offsets, dtype=np.int64))
        object.__setattr__(self, "values", frozen_array(self.values, dtype=np.int64))

    def __len__(self) -> int:
        return self.offsets.shape[0] - 1

    def __getitem__(self, n: int) -> np.ndarray:
        return self.values[self.offsets[n]:self.offsets[n + 1]]

    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def segment_ids(self) -> np.ndarray:
        return np.repeat(np.arange(len(self)), self.sizes())

    def to_lists(self) -> list:
        return [self[n].tolist() for n in range(len(self))]

    @classmethod
    def from_lists(cls, lists) -> "SegmentIndex":
        sizes = [len(x) for x in lists]
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        values = np.concatenate([np.asarray(x, dtype=np.int64) for x in lists]) if lists else np.zeros(0)
        return cls(offsets=offsets, values=values)


@dataclass(frozen=True)
class HumanGaussianGraph:
    """Dual-layer graph.

    evg[t, m] is the vertex that Gaussian m of frame t attaches to. evv[n] lists
    the vertices within d0 hops of n, itself included. groups[n] lists the
    (frame position, Gaussian index) pairs attached to n, both 0-based.
    """

    frames: Tuple[GaussianFrame, ...]
    poses: Tuple[Pose, ...]
    template: BodyTemplate
    evg: np.ndarray
    evv: SegmentIndex
    d0: int
    groups: SegmentIndex

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def n_gaussians(self) -> int:
        return self.evg.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.template.n_vertices

    def group_token_ids(self) -> np.ndarray:
        """Flattened token index t * M + m of every group member, in group order."""
        pairs = self.groups.values.reshape(-1, 2)
        return pairs[:, 0] * self.n_gaussians + pairs[:, 1]


def nearest_vertex_assign(centers: np.ndarray, posed_vertices: np.ndarray) -> np.ndarray:
    """Index of the Euclidean-nearest vertex for every center, ties to the lowest index.

    A k-d tree proposes candidates; distances are then recomputed exactly as an
    exhaustive scan would so the result is identical to brute force.
    """
    vertices = np.asarray(posed_vertices, dtype=np.float64).reshape(-1, 3)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if vertices.shape[0] == 0:
        raise EmptyVertexSet("cannot assign Gaussians to an empty vertex set")
    if centers.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)

    k = min(_CANDIDATES, vertices.shape[0])
    tree = cKDTree(vertices)
    _, candidates = tree.query(centers, k=k)
    candidates = np.asarray(candidates, dtype=np.int64).reshape(-1, k)
    d2 = ((centers[:, None, :] - vertices[candidates]) ** 2).sum(-1)

    order = np.lexsort((candidates, d2), axis=-1)
    rows = np.arange(centers.shape[0])
    best = candidates[rows, order[:, 0]]

    # every candidate tied: the tie may extend beyond the candidate set
    saturated = np.nonzero((d2.max(axis=1) == d2.min(axis=1)) & (k < vertices.shape[0]))[0]
    for i in saturated:
        full = ((centers[i] - vertices) ** 2).sum(-1)
        best[i] = int(np.argmin(full))
    return best


def face_adjacency(faces: np.ndarray, n_vertices: int) -> sparse.csr_matrix:
    """0/1 N x N matrix of vertices sharing a face."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    rows = faces[:, [0, 0, 1, 1, 2, 2]].reshape(-1)
    cols = faces[:, [1, 2, 0, 2, 0, 1]].reshape(-1)
    adjacency = sparse.csr_matrix((np.ones(rows.shape[0], dtype=np.int64), (rows, cols)), shape=(n_vertices, n_vertices))
    adjacency.sum_duplicates()
    adjacency.data[:] = 1
    return adjacency


def face_hop_neighbors(faces: np.ndarray, n_vertices: int, d0: int) -> SegmentIndex:
    """All vertices within d0 share-a-face hops of each vertex, sorted, self included."""
    if d0 < 0:
        raise ValueError(f"d0 must be nonnegative, got {d0}")
    step = (face_adjacency(faces, n_vertices) + sparse.identity(n_vertices, dtype=np.int64, format="csr")).tocsr()
    reach = sparse.identity(n_vertices, dtype=np.int64, format="csr")
    for _ in range(d0):
        reach = (reach @ step).tocsr()
        reach.data[:] = 1
    reach.sort_indices()
    return SegmentIndex(offsets=reach.indptr, values=reach.indices)


def _invert_assignment(evg: np.ndarray, n_vertices: int) -> SegmentIndex:
    n_frames, n_gaussians = evg.shape
    flat = evg.reshape(-1)
    order = np.argsort(flat, kind="stable")
    offsets = np.concatenate([[0], np.cumsum(np.bincount(flat, minlength=n_vertices))])
    pairs = np.stack([order // n_gaussians, order % n_gaussians], axis=1)
    return SegmentIndex(offsets=offsets, values=pairs)


def build_graph(frames: Sequence[GaussianFrame], poses: Sequence[Pose], template: BodyTemplate,
                d0: int, num_thread: int = 1) -> HumanGaussianGraph:
    """Construct the Human Gaussian Graph for T frames posed by T poses."""
    frames, poses = tuple(frames), tuple(poses)
    if len(frames) != len(poses):
        raise DimensionMismatch(f"{len(frames)} frames but {len(poses)} poses")
    if len(frames) == 0:
        raise DimensionMismatch("at least one frame is required")
    sizes = {len(f) for f in frames}
    if len(sizes) != 1:
        raise DimensionMismatch(f"frames disagree on the number of Gaussians: {sorted(sizes)}")

    def _assign_frame(t):
        posed = lbs_pose_vertices(template, poses[t])
        return nearest_vertex_assign(frames[t].gaussians.centers, posed)

    total = len(frames)
    num_thread = max(1, min(num_thread, total))
    evg = []
    with ThreadPool(num_thread) as pool:
        for t, assignment in enumerate(pool.imap(_assign_frame, range(total))):
            evg.append(assignment)
            logger.debug(f"Built frame {t + 1}/{total}")
    evg = np.stack(evg)

    evv = face_hop_neighbors(template.faces, template.n_vertices, d0)
    groups = _invert_assignment(evg, template.n_vertices)
    logger.info(f"graph: {total} frames x {evg.shape[1]} Gaussians -> {template.n_vertices} vertices, d0={d0}")
    return HumanGaussianGraph(
        frames=frames,
        poses=poses,
        template=template,
        evg=frozen_array(evg, dtype=np.int64),
        evv=evv,
        d0=int(d0),
        groups=groups,
    )
