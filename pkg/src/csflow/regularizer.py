"""KNN graph over the source cloud and the L1 graph-Laplacian rigidity loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from csflow._kernels import pairwise_sqdist, row_tiles
from csflow.core import DimensionError, FlowField, ParameterError, PointCloud, _vectors
from csflow.divergence import DivergenceValue

BRUTE_FORCE_LIMIT = 2000


@dataclass(frozen=True, eq=False)
class KnnGraph:
    """Directed k-nearest-neighbour lists, one row per point.

    Rows are sorted by ascending distance with ties broken by ascending
    index. ``clamped`` is set when the requested k exceeded N - 1.
    """

    neighbors: np.ndarray
    k: int
    clamped: bool = False

    def __len__(self) -> int:
        return len(self.neighbors)


def _knn_brute(points: np.ndarray, k: int) -> np.ndarray:
    n = len(points)
    out = np.empty((n, k), dtype=np.int64)
    cols = np.arange(n)
    for lo, hi in row_tiles(n, n):
        d2 = pairwise_sqdist(points[lo:hi], points)
        d2[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        # stable sort keeps ascending index among equal distances
        order = np.argsort(d2, axis=1, kind="stable")
        out[lo:hi] = cols[order[:, :k]]
    return out


def _knn_tree(points: np.ndarray, k: int) -> np.ndarray:
    tree = cKDTree(points)
    dist, _ = tree.query(points, k=k + 1)
    radius = dist[:, -1]
    # every point at the k-th distance is a candidate, so index tie-breaking stays exact
    balls = tree.query_ball_point(points, radius * (1 + 1e-12) + 1e-300)
    out = np.empty((len(points), k), dtype=np.int64)
    for i, cand in enumerate(balls):
        cand = np.array(cand, dtype=np.int64)
        cand = cand[cand != i]
        d2 = np.sum((points[cand] - points[i]) ** 2, axis=1)
        order = np.lexsort((cand, d2))
        out[i] = cand[order][:k]
    return out


def knn_indices(points: np.ndarray, k: int) -> np.ndarray:
    """Exact k nearest other points for every point, ties broken by index."""
    if len(points) <= BRUTE_FORCE_LIMIT:
        return _knn_brute(points, k)
    return _knn_tree(points, k)


def build_knn_graph(cloud: PointCloud, k: int = 50) -> KnnGraph:
    """Directed KNN graph; ``k`` is clamped to N - 1 for small clouds."""
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(points)
    if n < 2:
        raise DimensionError("a KNN graph needs at least two points")
    if int(k) < 1:
        raise ParameterError(f"k must be positive, got {k}")
    clamped = k > n - 1
    k_eff = min(int(k), n - 1)
    return KnnGraph(knn_indices(points, k_eff), k_eff, clamped)


def laplacian_loss(flow: FlowField, graph: KnnGraph, want_gradient: bool = False) -> DivergenceValue:
    """Mean over points of the mean L1 flow difference to each KNN neighbour.

    The gradient uses sign(0) = 0, so it is a valid subgradient everywhere.
    """
    d = _vectors(flow)
    nbrs = graph.neighbors
    if len(d) != len(nbrs):
        raise DimensionError(f"flow has {len(d)} vectors but the graph has {len(nbrs)} nodes")
    n, k = nbrs.shape
    diff = d[:, None, :] - d[nbrs]
    value = float(np.abs(diff).sum() / (n * k))
    gradient = None
    if want_gradient:
        s = np.sign(diff) / (n * k)
        gradient = s.sum(axis=1)
        flat = nbrs.ravel()
        pulled = s.reshape(-1, 3)
        for c in range(3):
            gradient[:, c] -= np.bincount(flat, weights=pulled[:, c], minlength=n)
    return DivergenceValue(value, gradient)
