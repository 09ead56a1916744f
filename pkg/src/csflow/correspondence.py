"""Soft-correspondence flow initialisation between voxelised clouds.

Voxels are matched through a cosine cost between per-voxel descriptors; the
top-K cheapest targets of each source voxel are blended with weights
exp(-cost / epsilon). Voxel flows are then spread back to the points by
inverse-distance interpolation.

The descriptor here is handcrafted (see :func:`compute_features`) and stands
in for a learned feature extractor.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from csflow.core import DimensionError, FlowField, ParameterError, PointCloud

# centered coords (3) + covariance eigenvalues (3) + relative density (1)
DESCRIPTOR_DIM = 7
SNAP_DISTANCE = 1e-12


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    resolution: float
    voxel_centers: np.ndarray
    point_to_voxel: np.ndarray
    counts: np.ndarray
    voxel_features: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.voxel_centers)


def voxelize(cloud: PointCloud, resolution: float = 0.1) -> VoxelGrid:
    """Bucket points by floor(coordinate / resolution).

    Each voxel's center is the centroid of its member points, and its
    feature (when the cloud carries features) the mean member feature.
    Voxels are ordered by their integer cell key.
    """
    if not resolution > 0.0 or not np.isfinite(resolution):
        raise ParameterError(f"voxel resolution must be positive, got {resolution}")
    pts = cloud.points
    keys = np.floor(pts / resolution).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    n_vox = len(counts)
    centers = np.zeros((n_vox, 3))
    np.add.at(centers, inverse, pts)
    centers /= counts[:, None]
    feats = None
    if cloud.features is not None:
        feats = np.zeros((n_vox, cloud.features.shape[1]))
        np.add.at(feats, inverse, cloud.features)
        feats /= counts[:, None]
    return VoxelGrid(float(resolution), centers, inverse, counts, feats)


def compute_features(grid: VoxelGrid, neighborhood_k: int = 16) -> VoxelGrid:
    """Attach a translation-invariant handcrafted descriptor to every voxel.

    Layout (7 columns, then any averaged point features appended):

    * 0-2: voxel center minus the grid centroid, divided by the bounding-box
      diagonal of the centers (zero for a single voxel);
    * 3-5: eigenvalues, descending, of the covariance of the
      ``neighborhood_k`` nearest voxel centers (the voxel itself included),
      in units of resolution squared;
    * 6: member point count divided by the mean count over the grid.
    """
    centers = grid.voxel_centers
    n = len(centers)
    if n == 0:
        raise DimensionError("cannot describe an empty voxel grid")
    k = max(1, min(int(neighborhood_k), n))

    centered = centers - centers.mean(axis=0)
    diag = float(np.linalg.norm(centers.max(axis=0) - centers.min(axis=0)))
    coord_block = centered / diag if diag > 0.0 else np.zeros_like(centered)

    if k == 1:
        eig_block = np.zeros((n, 3))
    else:
        _, idx = cKDTree(centers).query(centers, k=k)
        hood = centers[idx]
        hood = hood - hood.mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", hood, hood) / k
        eig_block = np.linalg.eigvalsh(cov)[:, ::-1] / grid.resolution**2
        eig_block = np.clip(eig_block, 0.0, None)

    density = (grid.counts / grid.counts.mean())[:, None]
    blocks = [coord_block, eig_block, density]
    if grid.voxel_features is not None and grid.voxel_features.shape[1] > 0:
        blocks.append(grid.voxel_features)
    return replace(grid, voxel_features=np.hstack(blocks))


def cosine_cost(source_features: np.ndarray, target_features: np.ndarray) -> np.ndarray:
    """1 - cosine similarity; rows or columns with zero norm get cost 1."""
    fs = np.asarray(source_features, dtype=np.float64)
    ft = np.asarray(target_features, dtype=np.float64)
    if fs.shape[1] != ft.shape[1]:
        raise DimensionError(
            f"feature dimensions differ: {fs.shape[1]} vs {ft.shape[1]}"
        )
    ns = np.linalg.norm(fs, axis=1)
    nt = np.linalg.norm(ft, axis=1)
    us = np.divide(fs, ns[:, None], out=np.zeros_like(fs), where=ns[:, None] > 0)
    ut = np.divide(ft, nt[:, None], out=np.zeros_like(ft), where=nt[:, None] > 0)
    cost = 1.0 - us @ ut.T
    return np.clip(cost, 0.0, 2.0)


def soft_correspondence_flow(
    source_grid: VoxelGrid,
    target_grid: VoxelGrid,
    top_k: int = 8,
    epsilon: float = 0.00625,
) -> np.ndarray:
    """Per-source-voxel flow toward the transport-weighted mean of its top-K matches."""
    if source_grid.voxel_features is None or target_grid.voxel_features is None:
        raise DimensionError("both grids need voxel features; run compute_features first")
    if len(source_grid) == 0 or len(target_grid) == 0:
        raise DimensionError("voxel grids must be nonempty")
    if not epsilon > 0.0:
        raise ParameterError(f"epsilon must be positive, got {epsilon}")
    cost = cosine_cost(source_grid.voxel_features, target_grid.voxel_features)
    n_t = cost.shape[1]
    k = max(1, min(int(top_k), n_t))
    if k < n_t:
        idx = np.argpartition(cost, k - 1, axis=1)[:, :k]
    else:
        idx = np.broadcast_to(np.arange(n_t), cost.shape)
    c = np.take_along_axis(cost, idx, axis=1)
    # shifting by the row minimum leaves the normalised weights unchanged
    weights = np.exp(-(c - c.min(axis=1, keepdims=True)) / epsilon)
    weights /= weights.sum(axis=1, keepdims=True)
    matched = np.einsum("nk,nkd->nd", weights, target_grid.voxel_centers[idx])
    return matched - source_grid.voxel_centers


def interpolate_to_points(
    voxel_flows: np.ndarray,
    grid: VoxelGrid,
    cloud: PointCloud,
    knn: int = 3,
) -> FlowField:
    """Inverse-distance blend of the ``knn`` nearest voxel flows at every point.

    A point within 1e-12 m of a voxel center takes that voxel's flow exactly.
    """
    flows = np.asarray(voxel_flows, dtype=np.float64)
    if len(grid) == 0:
        raise DimensionError("voxel grid is empty")
    if flows.shape != (len(grid), 3):
        raise DimensionError(f"expected {len(grid)} voxel flows, got shape {flows.shape}")
    if int(knn) < 1:
        raise ParameterError("knn must be at least 1")
    k = min(int(knn), len(grid))
    dist, idx = cKDTree(grid.voxel_centers).query(cloud.points, k=k)
    dist = dist.reshape(len(cloud), k)
    idx = idx.reshape(len(cloud), k)
    if k == 1:
        return FlowField(flows[idx[:, 0]])
    snapped = dist[:, 0] < SNAP_DISTANCE
    w = 1.0 / np.where(snapped[:, None], 1.0, dist)
    out = np.einsum("nk,nkd->nd", w, flows[idx]) / w.sum(axis=1, keepdims=True)
    out[snapped] = flows[idx[snapped, 0]]
    return FlowField(out)


def correspondence_flow(
    source: PointCloud,
    target: PointCloud,
    resolution: float = 0.1,
    top_k: int = 8,
    epsilon: float = 0.00625,
    neighborhood_k: int = 16,
    knn: int = 3,
) -> FlowField:
    """Full pipeline: voxelise, describe, match, interpolate back to source points."""
    src = compute_features(voxelize(source, resolution), neighborhood_k)
    tgt = compute_features(voxelize(target, resolution), neighborhood_k)
    return interpolate_to_points(soft_correspondence_flow(src, tgt, top_k, epsilon), src, source, knn)
