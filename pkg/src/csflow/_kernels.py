"""Low-level pairwise kernels shared by the loss modules."""

from __future__ import annotations

import math

import numpy as np
from numba import njit

# Largest number of pair entries materialised at once.
TILE_ELEMENTS = 4_000_000


@njit(cache=True)
def _sqdist_into(x, y, out, scale=1.0):
    for i in range(x.shape[0]):
        x0 = x[i, 0]
        x1 = x[i, 1]
        x2 = x[i, 2]
        for j in range(y.shape[0]):
            a = x0 - y[j, 0]
            b = x1 - y[j, 1]
            c = x2 - y[j, 2]
            out[i, j] = (a * a + b * b + c * c) * scale
    return out


def pairwise_sqdist(x: np.ndarray, y: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Squared Euclidean distances (times ``scale``), computed by explicit differences.

    The expansion |x|^2 + |y|^2 - 2<x, y> is avoided on purpose: it loses the
    exact zero for coincident points and breaks translation invariance.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    return _sqdist_into(x, y, np.empty((len(x), len(y))), float(scale))


def row_tiles(n_rows: int, n_cols: int, tile_rows: int | None = None):
    """Yield (start, stop) row ranges whose tiles hold at most TILE_ELEMENTS entries."""
    if tile_rows is None:
        tile_rows = max(1, TILE_ELEMENTS // max(n_cols, 1))
    tile_rows = max(1, int(tile_rows))
    for start in range(0, n_rows, tile_rows):
        yield start, min(start + tile_rows, n_rows)


def logsumexp(values) -> float:
    """log(sum(exp(values))) over all entries, shifted by the maximum."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return -math.inf
    m = float(values.max())
    if not math.isfinite(m):
        return m
    return m + math.log(float(np.exp(values - m).sum()))


class LogSumAccumulator:
    """Streaming log-sum-exp over blocks, merged in arrival order."""

    def __init__(self):
        self.max = -math.inf
        self.scaled_sum = 0.0

    def add(self, block_max: float, block_sum: float) -> None:
        """Add a block whose entries sum to ``block_sum * exp(block_max)``."""
        if block_max == -math.inf:
            return
        if block_max > self.max:
            self.scaled_sum = self.scaled_sum * math.exp(self.max - block_max) + block_sum
            self.max = block_max
        else:
            self.scaled_sum += block_sum * math.exp(block_max - self.max)

    @property
    def value(self) -> float:
        if self.scaled_sum == 0.0:
            return -math.inf
        return self.max + math.log(self.scaled_sum)
