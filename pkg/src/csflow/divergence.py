"""Point-set dissimilarities: Cauchy-Schwarz divergence between isotropic
Gaussian mixtures, Chamfer distance, and exact / entropic Earth Mover's distance.

All Gaussian cross terms are accumulated in the log domain; no mixture
overlap is ever formed as a plain probability.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from csflow._kernels import LogSumAccumulator, pairwise_sqdist, row_tiles
from csflow.core import DimensionError, GmmSpec, ParameterError, PointCloud, SizeError

LOG_2PI = math.log(2.0 * math.pi)
# Sinkhorn keeps a cost matrix and a kernel in memory up to this many entries
# (2 x 128 MB); larger problems fall back to tiled log-domain sweeps.
SINKHORN_DENSE_LIMIT = 16_000_000


@dataclass
class DivergenceValue:
    """A loss value and, optionally, its gradient w.r.t. the first cloud's points."""

    value: float
    gradient: np.ndarray | None = None
    terms: dict[str, float] = field(default_factory=dict)
    converged: bool = True


@dataclass
class CrossTermTable:
    """Dense table of log N(a_i | b_j, (var_a + var_b) I) + log w_a + log w_b."""

    log_terms: np.ndarray
    shared_variance_sum: float


def _coords(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DimensionError(f"expected an (n, 3) array of points, got shape {pts.shape}")
    if len(pts) == 0:
        raise DimensionError("point set is empty")
    return pts


def _check_positive(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value) or value <= 0.0:
        raise ParameterError(f"{name} must be positive and finite, got {value}")
    return value


def gaussian_log_density(x, mu, variance: float):
    """Log density of the 3D isotropic normal N(x | mu, variance * I).

    Broadcasts over leading dimensions of ``x`` and ``mu``.
    """
    variance = _check_positive("variance", variance)
    diff = np.asarray(x, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    sq = np.sum(diff * diff, axis=-1)
    out = -sq / (2.0 * variance) - 1.5 * LOG_2PI - 1.5 * math.log(variance)
    return float(out) if np.ndim(out) == 0 else out


def gaussian_product_identity(mu1, var1: float, mu2, var2: float):
    """Factor N(x|mu1, var1 I) N(x|mu2, var2 I) = c * N(x|mu12, var12 I).

    Returns ``(log c, mu12, var12)`` where ``log c`` is the log density of
    mu1 under N(mu2, (var1 + var2) I).
    """
    var1 = _check_positive("var1", var1)
    var2 = _check_positive("var2", var2)
    mu1 = np.asarray(mu1, dtype=np.float64)
    mu2 = np.asarray(mu2, dtype=np.float64)
    total = var1 + var2
    carrier = gaussian_log_density(mu1, mu2, total)
    mu12 = (var2 * mu1 + var1 * mu2) / total
    var12 = var1 * var2 / total
    return carrier, mu12, var12


def cross_term_table(a, b, spec_a: GmmSpec, spec_b: GmmSpec) -> CrossTermTable:
    """Dense log-domain Gaussian cross terms between two mixtures."""
    xa, xb = _coords(a), _coords(b)
    _check_spec(xa, spec_a, "first")
    _check_spec(xb, spec_b, "second")
    var_sum = spec_a.variance + spec_b.variance
    log_terms = (
        -pairwise_sqdist(xa, xb) / (2.0 * var_sum)
        - 1.5 * LOG_2PI
        - 1.5 * math.log(var_sum)
        + spec_a.log_weight
        + spec_b.log_weight
    )
    return CrossTermTable(log_terms, var_sum)


def _check_spec(points: np.ndarray, spec: GmmSpec, which: str) -> None:
    if spec.n_components != len(points):
        raise DimensionError(
            f"{which} mixture spec has {spec.n_components} components "
            f"but the cloud has {len(points)} points"
        )


def _overlap_block(x_tile, y, y_ext, inv_two_var, grad, self_pairs):
    q = pairwise_sqdist(x_tile, y, -inv_two_var)
    if self_pairs:
        # the tile contains the diagonal, whose exponent 0 is the maximum
        block_max = 0.0
    else:
        block_max = float(q.max())
        q -= block_max
    np.exp(q, out=q)
    g = None
    if grad == "cols":
        col = q.sum(axis=0)
        block_sum = float(col.sum())
        g = col[:, None] * y - q.T @ x_tile
    elif grad == "rows":
        # y_ext carries a ones column, so one product gives row sums too
        r = q @ y_ext
        block_sum = float(r[:, 3].sum())
        g = r[:, 3:4] * x_tile - r[:, :3]
    else:
        block_sum = float(q.sum())
    return block_max, block_sum, g


def mixture_log_overlap(
    x: np.ndarray,
    y: np.ndarray,
    var_sum: float,
    log_weight: float,
    grad: str | None = None,
    tile_rows: int | None = None,
    workers: int = 1,
):
    """log sum_ij exp(log N(x_i | y_j, var_sum I) + log_weight), tiled over rows of x.

    ``grad`` selects the derivative returned alongside the value: ``"rows"``
    for d/dx_i, ``"cols"`` for d/dy_j, ``None`` for no gradient. Tiles are
    reduced in row order, so results do not depend on ``workers``.
    """
    inv_two_var = 0.5 / var_sum
    tiles = list(row_tiles(len(x), len(y), tile_rows))
    self_pairs = x is y
    y_ext = np.hstack([y, np.ones((len(y), 1))]) if grad == "rows" else None

    def run(bounds):
        lo, hi = bounds
        return _overlap_block(x[lo:hi], y, y_ext, inv_two_var, grad, self_pairs)

    if workers > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(run, tiles))
    else:
        blocks = [run(t) for t in tiles]

    acc = LogSumAccumulator()
    for block_max, block_sum, _ in blocks:
        acc.add(block_max, block_sum)
    quad_lse = acc.value
    lse = quad_lse - 1.5 * LOG_2PI - 1.5 * math.log(var_sum) + log_weight
    if grad is None:
        return lse, None

    # d/dx_i of the quadratic exponent is -(x_i - y_j) / var_sum
    if grad == "rows":
        out = np.empty_like(x)
        for (lo, hi), (block_max, _, g) in zip(tiles, blocks):
            out[lo:hi] = g * (-math.exp(block_max - quad_lse) / var_sum)
    else:
        out = np.zeros_like(y)
        for (block_max, _, g) in blocks:
            out += g * (-math.exp(block_max - quad_lse) / var_sum)
    return lse, out


def _orientation_key(points: np.ndarray, variance: float):
    return (len(points), variance, points.tobytes())


def cs_divergence(
    warped_source,
    target,
    spec_s: GmmSpec,
    spec_t: GmmSpec,
    want_gradient: bool = False,
    *,
    include_target_self: bool = True,
    source_self_gradient: bool = True,
    target_self_term: float | None = None,
    tile_rows: int | None = None,
    workers: int = 1,
) -> DivergenceValue:
    """Closed-form Cauchy-Schwarz divergence between two isotropic mixtures.

    value = -log <G_s, G_t> + 0.5 log <G_s, G_s> + 0.5 log <G_t, G_t>, each
    inner product evaluated as a log-sum-exp of Gaussian cross terms with
    covariance (var_s + var_t) I, 2 var_s I and 2 var_t I respectively.

    The gradient (w.r.t. the warped source points) has an attraction part
    from the cross term and a repulsion part from the source self term; the
    latter can be dropped with ``source_self_gradient=False``. The target self
    term does not depend on the source; ``include_target_self=False`` removes
    it from the value too, and ``target_self_term`` supplies a cached copy.
    """
    xs = _coords(warped_source)
    xt = _coords(target)
    _check_spec(xs, spec_s, "source")
    _check_spec(xt, spec_t, "target")
    vs, vt = spec_s.variance, spec_t.variance
    cross_weight = spec_s.log_weight + spec_t.log_weight

    # The cross term is always evaluated in one canonical orientation so that
    # swapping the arguments reproduces the value bit for bit.
    swap = _orientation_key(xt, vt) < _orientation_key(xs, vs)
    if swap:
        cross, g_cross = mixture_log_overlap(
            xt, xs, vs + vt, cross_weight, "cols" if want_gradient else None, tile_rows, workers
        )
    else:
        cross, g_cross = mixture_log_overlap(
            xs, xt, vs + vt, cross_weight, "rows" if want_gradient else None, tile_rows, workers
        )
    ss_grad = "rows" if (want_gradient and source_self_gradient) else None
    source_self, g_ss = mixture_log_overlap(
        xs, xs, 2.0 * vs, 2.0 * spec_s.log_weight, ss_grad, tile_rows, workers
    )
    terms = {"cross": cross, "source_self": source_self}
    if include_target_self:
        target_self = target_self_term
        if target_self is None:
            target_self, _ = mixture_log_overlap(
                xt, xt, 2.0 * vt, 2.0 * spec_t.log_weight, None, tile_rows, workers
            )
        terms["target_self"] = target_self
        value = 0.5 * (source_self + target_self) - cross
    else:
        value = 0.5 * source_self - cross

    gradient = None
    if want_gradient:
        gradient = -g_cross
        if g_ss is not None:
            # the source appears on both sides of the self term
            gradient = gradient + g_ss
    return DivergenceValue(float(value), gradient, terms)


def _trapezoid_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


def _grid_density(points: np.ndarray, variance: float, axes) -> np.ndarray:
    sigma = math.sqrt(variance)
    norm = 1.0 / math.sqrt(2.0 * math.pi * variance)
    # isotropic components factor into per-axis 1D Gaussians
    per_axis = [
        norm * np.exp(-0.5 * ((ax[None, :] - points[:, d, None]) / sigma) ** 2)
        for d, ax in enumerate(axes)
    ]
    return np.einsum("ix,iy,iz->xyz", *per_axis) / len(points)


def cs_divergence_numeric(
    a,
    b,
    spec_a: GmmSpec,
    spec_b: GmmSpec,
    resolution: int | None = None,
) -> float:
    """Cauchy-Schwarz divergence by brute-force 3D trapezoid quadrature.

    Test oracle for :func:`cs_divergence`. The grid spans the joint bounding
    box padded by five of the widest standard deviations. With
    ``resolution=None`` the per-axis node count is chosen so the spacing is at
    most half the narrowest standard deviation (never below 32).
    """
    xa, xb = _coords(a), _coords(b)
    if len(xa) > 32 or len(xb) > 32:
        raise SizeError("the quadrature oracle only accepts clouds of at most 32 points")
    _check_spec(xa, spec_a, "first")
    _check_spec(xb, spec_b, "second")
    var_a, var_b = spec_a.variance, spec_b.variance
    pad = 5.0 * math.sqrt(max(var_a, var_b))
    both = np.vstack([xa, xb])
    lo = both.min(axis=0) - pad
    hi = both.max(axis=0) + pad
    if resolution is None:
        h_target = 0.5 * math.sqrt(min(var_a, var_b))
        resolution = max(32, int(math.ceil(float((hi - lo).max()) / h_target)) + 1)
    if resolution < 32:
        raise ParameterError("quadrature resolution must be at least 32 nodes per axis")
    axes = [np.linspace(lo[d], hi[d], resolution) for d in range(3)]
    weights = [_trapezoid_weights(resolution, ax[1] - ax[0]) for ax in axes]

    dens_a = _grid_density(xa, var_a, axes)
    dens_b = _grid_density(xb, var_b, axes)

    def integrate(f):
        return float(np.einsum("xyz,x,y,z->", f, *weights))

    cross = integrate(dens_a * dens_b)
    self_a = integrate(dens_a * dens_a)
    self_b = integrate(dens_b * dens_b)
    return -math.log(cross / math.sqrt(self_a * self_b))


def _nearest(x: np.ndarray, y: np.ndarray):
    """Index of, and squared distance to, the nearest y for each x (lowest index on ties)."""
    idx = np.empty(len(x), dtype=np.int64)
    d2 = np.empty(len(x))
    for lo, hi in row_tiles(len(x), len(y)):
        block = pairwise_sqdist(x[lo:hi], y)
        j = block.argmin(axis=1)
        idx[lo:hi] = j
        d2[lo:hi] = block[np.arange(hi - lo), j]
    return idx, d2


def chamfer_distance(a, b, want_gradient: bool = False) -> DivergenceValue:
    """Symmetric Chamfer distance: mean squared nearest-neighbour distance both ways."""
    xa, xb = _coords(a), _coords(b)
    nn_ab, d_ab = _nearest(xa, xb)
    nn_ba, d_ba = _nearest(xb, xa)
    forward = float(d_ab.mean())
    backward = float(d_ba.mean())
    gradient = None
    if want_gradient:
        gradient = 2.0 * (xa - xb[nn_ab]) / len(xa)
        pulls = 2.0 * (xa[nn_ba] - xb) / len(xb)
        for d in range(3):
            gradient[:, d] += np.bincount(nn_ba, weights=pulls[:, d], minlength=len(xa))
    return DivergenceValue(forward + backward, gradient, {"forward": forward, "backward": backward})


def emd_exact(a, b) -> float:
    """Minimum total Euclidean matching cost over all bijections (exhaustive, N <= 10)."""
    xa, xb = _coords(a), _coords(b)
    n = len(xa)
    if len(xb) != n:
        raise SizeError(f"exact EMD needs equal sizes, got {n} and {len(xb)}")
    if n > 10:
        raise SizeError(f"exact EMD enumerates n! bijections; n={n} exceeds the limit of 10")
    cost = np.sqrt(pairwise_sqdist(xa, xb))
    rows = np.arange(n)
    best = math.inf
    perms = itertools.permutations(range(n))
    while True:
        chunk = np.array(list(itertools.islice(perms, 40320)), dtype=np.int64)
        if chunk.size == 0:
            break
        best = min(best, float(cost[rows, chunk].sum(axis=1).min()))
    return best


@dataclass
class SinkhornResult:
    """Dual potentials of an entropic transport problem with uniform marginals."""

    f: np.ndarray
    g: np.ndarray
    epsilon: float
    iterations: int
    marginal_error: float
    converged: bool


def _distance_block(x_tile, y):
    return np.sqrt(pairwise_sqdist(x_tile, y))


def _softmin(x, y, potential, eps, log_weight, dense_cost=None):
    """-eps * log sum_j exp((potential_j - C_ij) / eps + log_weight) for every row i."""
    out = np.empty(len(x))
    tiles = [(0, len(x))] if dense_cost is not None else row_tiles(len(x), len(y))
    for lo, hi in tiles:
        cost = dense_cost if dense_cost is not None else _distance_block(x[lo:hi], y)
        z = (potential[None, :] - cost) / eps
        m = z.max(axis=1)
        out[lo:hi] = -eps * (m + np.log(np.exp(z - m[:, None]).sum(axis=1)) + log_weight)
    return out


def _scaling_sweeps(cost, f, g, eps, log_a, log_b, sweeps):
    """Sinkhorn scaling iterations on the kernel stabilised by (f, g).

    Returns updated potentials and the row-marginal L1 error measured before
    the final column update, or ``None`` if the stabilised kernel has an empty
    row or column (the caller then falls back to log-domain sweeps).
    """
    kernel = f[:, None] + g[None, :]
    kernel -= cost
    kernel /= eps
    np.exp(kernel, out=kernel)
    a, b = math.exp(log_a), math.exp(log_b)
    u = np.ones(len(f))
    v = np.ones(len(g))
    err = math.inf
    for _ in range(sweeps):
        row = kernel @ (v * b)
        if not np.all(row > 0.0) or not np.all(np.isfinite(row)):
            return None
        err = float(np.sum(np.abs(u * row - 1.0)) * a)
        u = 1.0 / row
        col = kernel.T @ (u * a)
        if not np.all(col > 0.0) or not np.all(np.isfinite(col)):
            return None
        v = 1.0 / col
    return f + eps * np.log(u), g + eps * np.log(v), err


def sinkhorn(
    a,
    b,
    epsilon: float,
    max_iters: int = 1000,
    tol: float = 1e-6,
    init: tuple[np.ndarray, np.ndarray] | None = None,
    anneal: bool = True,
) -> SinkhornResult:
    """Stabilised Sinkhorn iterations for uniform marginals and Euclidean cost.

    Potentials live in the log domain. When the cost matrix has at most
    ``SINKHORN_DENSE_LIMIT`` entries, sweeps run as plain scalings of a
    kernel re-centred on the current potentials (absorbed every ten sweeps);
    otherwise each sweep is a tiled log-sum-exp. Without a warm start the regularisation is annealed
    geometrically from the cost scale down to ``epsilon`` (each intermediate
    stage capped at 100 sweeps). ``max_iters`` bounds the sweeps at the final
    ``epsilon``. Convergence is declared when the L1 violation of the row
    marginals drops below ``tol``.
    """
    xa, xb = _coords(a), _coords(b)
    epsilon = _check_positive("epsilon", epsilon)
    if int(max_iters) < 1:
        raise ParameterError("max_iters must be at least 1")
    n, m = len(xa), len(xb)
    log_a, log_b = -math.log(n), -math.log(m)
    dense = n * m <= SINKHORN_DENSE_LIMIT
    cost = _distance_block(xa, xb) if dense else None

    if init is not None:
        f, g = (np.array(p, dtype=np.float64) for p in init)
        schedule = [epsilon]
    else:
        f = np.zeros(n)
        g = np.zeros(m)
        schedule = [epsilon]
        if anneal:
            scale = float(cost.max()) if dense else float(np.ptp(np.vstack([xa, xb]), axis=0).max())
            eps = scale
            stages = []
            while eps > 2.0 * epsilon:
                stages.append(eps)
                eps *= 0.5
            schedule = stages + [epsilon]
        # a feasible start: the first log-domain sweep fixes both potentials
        f = _softmin(xa, xb, g, schedule[0], log_b, cost)
        g = _softmin(xb, xa, f, schedule[0], log_a, None if cost is None else cost.T)

    total = 0
    err = math.inf
    converged = False
    for stage, eps in enumerate(schedule):
        final = stage == len(schedule) - 1
        limit = int(max_iters) if final else 100
        stage_tol = tol if final else max(tol, 1e-3)
        done = 0
        while done < limit:
            sweeps = min(10, limit - done)
            step = _scaling_sweeps(cost, f, g, eps, log_a, log_b, sweeps) if dense else None
            if step is None:
                sweeps = 1
                f_new = _softmin(xa, xb, g, eps, log_b, cost)
                err = float(np.sum(np.exp(log_a) * np.abs(np.expm1((f - f_new) / eps))))
                f = f_new
                g = _softmin(xb, xa, f, eps, log_a, None if cost is None else cost.T)
            else:
                f, g, err = step
            done += sweeps
            total += sweeps
            if err < stage_tol:
                converged = final
                break
    return SinkhornResult(f, g, epsilon, total, err, converged)


def transport_cost(a, b, potentials: SinkhornResult, want_gradient: bool = False):
    """Primal cost sum_ij P_ij C_ij of the entropic plan, and its gradient w.r.t. a.

    The plan is held fixed when differentiating.
    """
    xa, xb = _coords(a), _coords(b)
    eps = potentials.epsilon
    f, g = potentials.f, potentials.g
    log_ab = -math.log(len(xa)) - math.log(len(xb))
    total = 0.0
    grad = np.zeros_like(xa) if want_gradient else None
    for lo, hi in row_tiles(len(xa), len(xb)):
        cost = _distance_block(xa[lo:hi], xb)
        plan = np.exp((f[lo:hi, None] + g[None, :] - cost) / eps + log_ab)
        total += float((plan * cost).sum())
        if want_gradient:
            # unit direction a_i - b_j; coincident pairs contribute nothing
            w = np.divide(plan, cost, out=np.zeros_like(plan), where=cost > 0.0)
            grad[lo:hi] = w.sum(axis=1)[:, None] * xa[lo:hi] - w @ xb
    return total, grad


def emd_approx(
    a,
    b,
    want_gradient: bool = False,
    epsilon: float = 1e-3,
    max_iters: int = 1000,
    tol: float = 1e-6,
) -> DivergenceValue:
    """Entropic optimal-transport approximation of the Earth Mover's distance.

    Marginals are uniform (1/N and 1/M). The transport cost is scaled by N so
    that for equal sizes it is comparable with the bijection cost returned by
    :func:`emd_exact`. If the marginal tolerance is not met within
    ``max_iters`` sweeps the last iterate is returned with
    ``converged=False``.
    """
    xa = _coords(a)
    result = sinkhorn(xa, b, epsilon, max_iters, tol)
    cost, grad = transport_cost(xa, b, result, want_gradient)
    n = len(xa)
    return DivergenceValue(
        n * cost,
        None if grad is None else n * grad,
        {"iterations": float(result.iterations), "marginal_error": result.marginal_error},
        converged=result.converged,
    )
