import numpy as np
import pytest

from hgg_avatar.utils.errors import DimensionMismatch, EmptyVertexSet
from hgg_avatar.utils.graph_utils import (
    SegmentIndex,
    build_graph,
    face_adjacency,
    face_hop_neighbors,
    nearest_vertex_assign,
)
from hgg_avatar.utils.lbs_utils import lbs_pose_vertices
from hgg_avatar.utils.oracles import oracle_hops, oracle_nearest
from hgg_avatar.utils.synth_utils import icosphere


def test_nearest_matches_exhaustive_scan(rng):
    """200 random instances agree exactly with the O(MN) scan"""
    for _ in range(200):
        m = int(rng.integers(1, 60))
        n = int(rng.integers(1, 40))
        vertices = rng.normal(size=(n, 3))
        centers = rng.normal(size=(m, 3))
        np.testing.assert_array_equal(nearest_vertex_assign(centers, vertices), oracle_nearest(centers, vertices))


def test_nearest_on_grid_ties(rng):
    """integer grids produce many exact ties; lowest index wins"""
    for _ in range(20):
        vertices = rng.integers(0, 3, size=(30, 3)).astype(np.float64)
        centers = rng.integers(0, 6, size=(50, 3)) / 2.0
        np.testing.assert_array_equal(nearest_vertex_assign(centers, vertices), oracle_nearest(centers, vertices))


def test_nearest_examples():
    vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    assert nearest_vertex_assign(np.zeros((1, 3)), vertices).tolist() == [0]
    assert nearest_vertex_assign([[0.9, 0.0, 0.0]], vertices).tolist() == [1]
    assert nearest_vertex_assign([[0.5, 0.0, 0.0]], vertices).tolist() == [0]
    assert nearest_vertex_assign([[0.0, 5.0, 0.0]], vertices[1:]).tolist() == [0]


def test_nearest_duplicate_vertices_pick_lowest_index():
    vertices = np.array([[3.0, 0.0, 0.0]] + [[1.0, 1.0, 1.0]] * 6)
    assert nearest_vertex_assign([[1.0, 1.0, 1.2]], vertices).tolist() == [1]


def test_nearest_empty_inputs():
    with pytest.raises(EmptyVertexSet):
        nearest_vertex_assign(np.zeros((2, 3)), np.zeros((0, 3)))
    assert nearest_vertex_assign(np.zeros((0, 3)), np.ones((4, 3))).shape == (0,)


@pytest.mark.parametrize("subdivisions", [0, 1, 2])
@pytest.mark.parametrize("d0", [0, 1, 2, 3])
def test_face_hops_match_bfs(subdivisions, d0):
    vertices, faces = icosphere(subdivisions)
    fast = face_hop_neighbors(faces, len(vertices), d0)
    assert fast.to_lists() == oracle_hops(faces, len(vertices), d0)


def test_face_hops_examples():
    triangle = np.array([[0, 1, 2]])
    assert face_hop_neighbors(triangle, 3, 0).to_lists() == [[0], [1], [2]]
    assert face_hop_neighbors(triangle, 3, 1).to_lists() == [[0, 1, 2]] * 3
    _, faces = icosphere(0)
    assert all(len(n) == 12 for n in face_hop_neighbors(faces, 12, 5).to_lists())


def test_face_adjacency_is_symmetric_01():
    _, faces = icosphere(1)
    adjacency = face_adjacency(faces, 42)
    dense = adjacency.toarray()
    assert set(np.unique(dense)) <= {0, 1}
    np.testing.assert_array_equal(dense, dense.T)
    assert dense.diagonal().sum() == 0


def test_negative_hop_radius():
    _, faces = icosphere(0)
    with pytest.raises(ValueError):
        face_hop_neighbors(faces, 12, -1)


def test_segment_index_round_trip():
    lists = [[3, 1], [], [2]]
    index = SegmentIndex.from_lists(lists)
    assert len(index) == 3
    assert index.to_lists() == lists
    assert index.sizes().tolist() == [2, 0, 1]
    assert index.segment_ids().tolist() == [0, 0, 2]


def test_build_graph_partitions_gaussians(small_scene):
    """every (frame, Gaussian) pair sits in exactly one vertex group"""
    graph = build_graph(small_scene.frames, small_scene.poses, small_scene.template, d0=1)
    T, M, N = small_scene.n_frames, len(small_scene.frames[0]), small_scene.template.n_vertices
    assert graph.evg.shape == (T, M)
    assert graph.groups.sizes().sum() == T * M
    assert len(graph.groups) == N

    pairs = graph.groups.values.reshape(-1, 2)
    assert sorted(map(tuple, pairs.tolist())) == [(t, m) for t in range(T) for m in range(M)]
    for n in range(N):
        for t, m in graph.groups[n]:
            assert graph.evg[t, m] == n


def test_build_graph_matches_oracles(small_scene):
    template = small_scene.template
    graph = build_graph(small_scene.frames, small_scene.poses, template, d0=2, num_thread=3)
    for t, (frame, pose) in enumerate(zip(small_scene.frames, small_scene.poses)):
        expected = oracle_nearest(frame.gaussians.centers, lbs_pose_vertices(template, pose))
        np.testing.assert_array_equal(graph.evg[t], expected)
    assert graph.evv.to_lists() == oracle_hops(template.faces, template.n_vertices, 2)
    assert graph.d0 == 2


def test_build_graph_thread_count_does_not_change_result(small_scene):
    one = build_graph(small_scene.frames, small_scene.poses, small_scene.template, d0=1, num_thread=1)
    many = build_graph(small_scene.frames, small_scene.poses, small_scene.template, d0=1, num_thread=4)
    np.testing.assert_array_equal(one.evg, many.evg)
    np.testing.assert_array_equal(one.groups.values, many.groups.values)


def test_build_graph_rejects_mismatched_inputs(small_scene):
    with pytest.raises(DimensionMismatch):
        build_graph(small_scene.frames, small_scene.poses[:-1], small_scene.template, d0=1)
    with pytest.raises(DimensionMismatch):
        build_graph([], [], small_scene.template, d0=1)


@pytest.mark.parametrize("d0", [0, 1, 2])
def test_face_hops_grow_with_the_radius(d0):
    vertices, faces = icosphere(2)
    inner = face_hop_neighbors(faces, len(vertices), d0).to_lists()
    outer = face_hop_neighbors(faces, len(vertices), d0 + 1).to_lists()
    for n, (a, b) in enumerate(zip(inner, outer)):
        assert set(a) <= set(b), n
        assert n in a


def test_nearest_matches_exhaustive_scan_at_scale(rng):
    vertices = rng.normal(size=(500, 3))
    centers = rng.normal(size=(1000, 3))
    np.testing.assert_array_equal(nearest_vertex_assign(centers, vertices), oracle_nearest(centers, vertices))
