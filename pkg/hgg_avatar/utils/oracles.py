"""Brute-force references for the fast paths in graph_utils and splat_utils.

Everything here is deliberately naive: plain arrays and loops, no spatial
index, no bounding boxes, no early termination.
"""
from collections import deque

import numpy as np

from hgg_avatar.utils.consts import COV2D_FLOOR, SIGMA_CUTOFF
from hgg_avatar.utils.splat_utils import RenderedImage, quaternion_matrices
from hgg_avatar.utils.types import Camera, as_cloud


def oracle_nearest(centers, vertices) -> np.ndarray:
    """Exhaustive O(MN) nearest-vertex scan, ties to the lowest index."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    out = np.zeros(centers.shape[0], dtype=np.int64)
    for m, c in enumerate(centers):
        best, best_d = 0, np.inf
        for i, v in enumerate(vertices):
            d = ((c - v) ** 2).sum()
            if d < best_d:
                best, best_d = i, d
        out[m] = best
    return out


def oracle_hops(faces, n_vertices: int, d0: int) -> list:
    """Breadth-first search from every vertex on the share-a-face adjacency."""
    adjacency = [set() for _ in range(n_vertices)]
    for a, b, c in np.asarray(faces, dtype=np.int64).reshape(-1, 3):
        adjacency[a].update((b, c))
        adjacency[b].update((a, c))
        adjacency[c].update((a, b))

    out = []
    for start in range(n_vertices):
        dist = {start: 0}
        queue = deque([start])
        while queue:
            u = queue.popleft()
            if dist[u] == d0:
                continue
            for v in adjacency[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        out.append(sorted(int(v) for v in dist))
    return out


def oracle_render(gaussians, camera: Camera) -> RenderedImage:
    """Every Gaussian evaluated at every pixel, full sort, no early-out."""
    cloud = as_cloud(gaussians)
    h, w = camera.height, camera.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)

    splats = []
    for i in range(len(cloud)):
        p = camera.rotation @ cloud.centers[i] + camera.translation
        if p[2] <= camera.near:
            continue
        rot = quaternion_matrices(cloud.rotations[i])
        sigma = rot @ np.diag(cloud.scales[i] ** 2) @ rot.T
        jac = np.array([
            [camera.fx / p[2], 0.0, -camera.fx * p[0] / p[2] ** 2],
            [0.0, camera.fy / p[2], -camera.fy * p[1] / p[2] ** 2],
        ])
        t = jac @ camera.rotation
        cov = t @ sigma @ t.T + COV2D_FLOOR * np.eye(2)
        mean = np.array([camera.fx * p[0] / p[2] + camera.cx, camera.fy * p[1] / p[2] + camera.cy])
        splats.append((p[2], i, mean, np.linalg.inv(cov)))
    splats.sort(key=lambda s: (s[0], s[1]))

    rgb = np.zeros((h, w, 3))
    trans = np.ones((h, w))
    for _, i, mean, conic in splats:
        dx, dy = xs - mean[0], ys - mean[1]
        m2 = conic[0, 0] * dx * dx + (conic[0, 1] + conic[1, 0]) * dx * dy + conic[1, 1] * dy * dy
        weight = np.where(m2 <= SIGMA_CUTOFF ** 2, np.exp(-0.5 * m2), 0.0)
        a = cloud.opacities[i] * weight
        rgb += cloud.colors[i] * (a * trans)[..., None]
        trans *= 1.0 - a
    return RenderedImage(rgb=rgb, alpha=1.0 - trans)
