"""Domain types shared across the package: clouds, flows, mixture specs, metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class CsFlowError(Exception):
    """Base class for errors raised by csflow."""


class DimensionError(CsFlowError, ValueError):
    """Array shapes or lengths disagree, or a required collection is empty."""


class ParameterError(CsFlowError, ValueError):
    """A scalar parameter is outside its valid range."""


class SizeError(CsFlowError, ValueError):
    """Input is too large (or unequal in size) for an exhaustive routine."""


def _as_points(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DimensionError(f"{name} must have shape (n, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered 3D points (meters) with optional per-point feature rows."""

    points: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        pts = _as_points(self.points, "points")
        if len(pts) == 0:
            raise DimensionError("a point cloud needs at least one point")
        object.__setattr__(self, "points", pts)
        if self.features is not None:
            feats = np.array(self.features, dtype=np.float64)
            if feats.ndim == 1:
                feats = feats.reshape(-1, 1)
            if feats.ndim != 2 or len(feats) != len(pts):
                raise DimensionError(
                    f"features must have one row per point ({len(pts)}), got shape {feats.shape}"
                )
            feats.setflags(write=False)
            object.__setattr__(self, "features", feats)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def n_points(self) -> int:
        return len(self.points)

    def translated(self, offset) -> "PointCloud":
        return PointCloud(self.points + np.asarray(offset, dtype=np.float64), self.features)


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-point 3D displacement vectors, aligned with a source cloud."""

    vectors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vectors", _as_points(self.vectors, "flow vectors"))

    def __len__(self) -> int:
        return len(self.vectors)

    @classmethod
    def zeros(cls, n: int) -> "FlowField":
        return cls(np.zeros((n, 3)))


@dataclass(frozen=True)
class GmmSpec:
    """Isotropic, uniformly weighted Gaussian mixture attached to a cloud.

    Every component has covariance ``variance * I`` and weight
    ``1 / n_components``.
    """

    variance: float
    n_components: int

    def __post_init__(self):
        var = float(self.variance)
        if not np.isfinite(var) or var <= 0.0:
            raise ParameterError(f"mixture variance must be positive and finite, got {self.variance}")
        if int(self.n_components) < 1:
            raise DimensionError("a mixture needs at least one component")
        object.__setattr__(self, "variance", var)
        object.__setattr__(self, "n_components", int(self.n_components))

    @property
    def weight(self) -> float:
        return 1.0 / self.n_components

    @property
    def log_weight(self) -> float:
        return -float(np.log(self.n_components))

    @classmethod
    def for_cloud(cls, cloud: PointCloud, variance: float) -> "GmmSpec":
        return cls(variance, len(cloud))


@dataclass(frozen=True)
class MetricThresholds:
    """Error thresholds for the scene-flow accuracy metrics (meters / fractions)."""

    strict_abs: float = 0.05
    strict_rel: float = 0.05
    relaxed_abs: float = 0.1
    relaxed_rel: float = 0.1
    outlier_abs: float = 0.3
    outlier_rel: float = 0.1


@dataclass(frozen=True)
class FlowMetrics:
    epe3d: float
    acc3d_strict: float
    acc3d_relaxed: float
    outliers3d: float

    def as_dict(self) -> dict[str, float]:
        return {
            "epe3d": self.epe3d,
            "acc3d_strict": self.acc3d_strict,
            "acc3d_relaxed": self.acc3d_relaxed,
            "outliers3d": self.outliers3d,
        }


def _vectors(x) -> np.ndarray:
    if isinstance(x, FlowField):
        return x.vectors
    if isinstance(x, PointCloud):
        return x.points
    return np.asarray(x, dtype=np.float64)


def warp(cloud: PointCloud, flow: FlowField) -> PointCloud:
    """Move every point by its flow vector; features are carried through."""
    vec = _vectors(flow)
    if vec.shape != cloud.points.shape:
        raise DimensionError(
            f"flow has {len(vec)} vectors but the cloud has {len(cloud)} points"
        )
    return PointCloud(cloud.points + vec, cloud.features)


def evaluate_flow(
    estimated: FlowField,
    ground_truth: FlowField,
    thresholds: MetricThresholds = MetricThresholds(),
) -> FlowMetrics:
    """EPE3D, strict/relaxed accuracy and outlier ratio of a flow estimate.

    A point whose ground-truth flow is exactly zero has no defined relative
    error; for it only the absolute thresholds are consulted.
    """
    est = _vectors(estimated)
    gt = _vectors(ground_truth)
    if est.shape != gt.shape or est.ndim != 2 or len(est) == 0:
        raise DimensionError(
            f"estimated and ground-truth flows must be equal-length and nonempty "
            f"(got {est.shape} and {gt.shape})"
        )
    err = np.linalg.norm(est - gt, axis=1)
    gt_norm = np.linalg.norm(gt, axis=1)
    moving = gt_norm > 0.0
    rel = np.full_like(err, np.inf)
    rel[moving] = err[moving] / gt_norm[moving]

    t = thresholds
    strict = (err < t.strict_abs) | (moving & (rel < t.strict_rel))
    relaxed = (err < t.relaxed_abs) | (moving & (rel < t.relaxed_rel))
    outlier = (err > t.outlier_abs) | (moving & (rel > t.outlier_rel))
    return FlowMetrics(
        # exactly rounded sum, so the result does not depend on point order
        epe3d=math.fsum(err.tolist()) / len(err),
        acc3d_strict=float(strict.mean()),
        acc3d_relaxed=float(relaxed.mean()),
        outliers3d=float(outlier.mean()),
    )
