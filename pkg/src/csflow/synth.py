"""Synthetic point-cloud pairs with exact ground-truth flow.

Shapes are built from one or more rigid objects. The target is the moved
source, then both clouds receive independent jitter, a fraction of target
points is dropped, and uniform outliers are appended to the target.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from csflow.core import FlowField, ParameterError, PointCloud

SHAPES = ("uniform-box", "sphere-surface", "two-planes", "multi-object")


@dataclass(frozen=True)
class RigidMotion:
    """Rotation (axis-angle, radians) about the object's centroid, then translation (m)."""

    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def displacement(self, points: np.ndarray) -> np.ndarray:
        """Per-point motion, computed as (R - I)(p - c) + t so that a zero
        rotation yields exactly the translation (and exactly zero when static)."""
        rel = points - points.mean(axis=0)
        rot = Rotation.from_rotvec(np.asarray(self.rotation, dtype=np.float64))
        return (rot.apply(rel) - rel) + np.asarray(self.translation, dtype=np.float64)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points + self.displacement(points)


@dataclass(frozen=True)
class SceneRecipe:
    """Parameters of a synthetic scene.

    ``motion`` holds one rigid motion per object; a single motion is shared by
    all objects. Object counts: 1 for uniform-box and sphere-surface, 2 for
    two-planes, and ``max(2, len(motion))`` for multi-object.
    ``outlier_scale`` is the side of the outlier box in multiples of the
    scene diameter (bounding-box diagonal of the source).
    """

    n_points: int = 2048
    shape: str = "uniform-box"
    motion: tuple[RigidMotion, ...] = (RigidMotion(),)
    jitter_sigma: float = 0.0
    outlier_fraction: float = 0.0
    outlier_scale: float = 5.0
    drop_fraction: float = 0.0
    seed: int = 0
    source_outliers: bool = False

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ParameterError(f"unknown shape {self.shape!r}; choose from {', '.join(SHAPES)}")
        if int(self.n_points) < 8:
            raise ParameterError("n_points must be at least 8")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ParameterError("outlier_fraction must lie in [0, 1)")
        if not 0.0 <= self.drop_fraction < 1.0:
            raise ParameterError("drop_fraction must lie in [0, 1)")
        if self.jitter_sigma < 0.0:
            raise ParameterError("jitter_sigma must be nonnegative")
        if not self.outlier_scale > 0.0:
            raise ParameterError("outlier_scale must be positive")
        motions = tuple(
            m if isinstance(m, RigidMotion) else RigidMotion(**m) for m in self.motion
        )
        if not motions:
            motions = (RigidMotion(),)
        object.__setattr__(self, "motion", motions)

    @property
    def n_objects(self) -> int:
        if self.shape == "two-planes":
            return 2
        if self.shape == "multi-object":
            return max(2, len(self.motion))
        return 1

    def motion_for(self, obj: int) -> RigidMotion:
        return self.motion[0] if len(self.motion) == 1 else self.motion[obj]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SceneRecipe":
        data = dict(data)
        if "motion" in data:
            data["motion"] = tuple(
                RigidMotion(tuple(m.get("rotation", (0, 0, 0))), tuple(m.get("translation", (0, 0, 0))))
                for m in data["motion"]
            )
        return cls(**data)


def _split(n: int, parts: int) -> list[int]:
    base = [n // parts] * parts
    for i in range(n - sum(base)):
        base[i] += 1
    return base


def _sample_objects(recipe: SceneRecipe, rng: np.random.Generator) -> list[np.ndarray]:
    n = recipe.n_points
    if recipe.shape == "uniform-box":
        return [rng.uniform(-0.5, 0.5, size=(n, 3))]
    if recipe.shape == "sphere-surface":
        v = rng.normal(size=(n, 3))
        return [0.5 * v / np.linalg.norm(v, axis=1, keepdims=True)]
    if recipe.shape == "two-planes":
        # a 1 m x 1 m floor patch and a 1 m x 1 m wall patch, 0.2 m apart
        n_floor, n_wall = _split(n, 2)
        floor = np.column_stack([
            rng.uniform(-1.2, -0.2, n_floor), rng.uniform(-0.5, 0.5, n_floor), np.zeros(n_floor)
        ])
        wall = np.column_stack([
            np.zeros(n_wall), rng.uniform(-0.5, 0.5, n_wall), rng.uniform(0.0, 1.0, n_wall)
        ])
        return [floor, wall]
    # multi-object: 0.6 m boxes spaced 1 m apart along x
    counts = _split(n, recipe.n_objects)
    return [
        rng.uniform(-0.3, 0.3, size=(c, 3)) + np.array([1.0 * i, 0.0, 0.0])
        for i, c in enumerate(counts)
    ]


def generate(recipe: SceneRecipe):
    """Return ``(source, target, truth)``; truth is the noiseless per-source-point motion."""
    rng = np.random.default_rng(recipe.seed)
    objects = _sample_objects(recipe, rng)
    clean_source = np.vstack(objects)
    truth = np.vstack([recipe.motion_for(i).displacement(obj) for i, obj in enumerate(objects)])
    moved = clean_source + truth

    source = clean_source.copy()
    target = moved.copy()
    if recipe.jitter_sigma > 0.0:
        source += rng.normal(scale=recipe.jitter_sigma, size=source.shape)
        target += rng.normal(scale=recipe.jitter_sigma, size=target.shape)

    n_drop = int(round(recipe.drop_fraction * len(target)))
    if n_drop:
        keep = np.sort(rng.permutation(len(target))[n_drop:])
        target = target[keep]

    n_out = int(round(recipe.outlier_fraction * recipe.n_points))
    if n_out:
        lo, hi = clean_source.min(axis=0), clean_source.max(axis=0)
        center = 0.5 * (lo + hi)
        side = recipe.outlier_scale * float(np.linalg.norm(hi - lo))
        target = np.vstack([target, center + rng.uniform(-0.5, 0.5, size=(n_out, 3)) * side])
        if recipe.source_outliers:
            # static clutter: present in the source, zero motion
            source = np.vstack([source, center + rng.uniform(-0.5, 0.5, size=(n_out, 3)) * side])
            truth = np.vstack([truth, np.zeros((n_out, 3))])

    return PointCloud(source), PointCloud(target), FlowField(truth)
