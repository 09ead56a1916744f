"""Command-line interface: ``csflow {estimate,eval,divergence,gen,bench}``.

Exit codes: 0 success, 1 usage/configuration/data error, 2 the optimiser
stopped at ``--iters`` without meeting its tolerance (outputs are still
written).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor

from csflow.core import CsFlowError, GmmSpec, evaluate_flow
from csflow.divergence import chamfer_distance, cs_divergence, emd_approx, emd_exact
from csflow.io import (
    bench_rows_with_means,
    format_metrics,
    read_cloud,
    read_flow,
    write_bench_csv,
    write_cloud,
    write_flow,
)
from csflow.optimizer import LOSSES, OptimizeConfig, estimate_flow, resolve_variance
from csflow.synth import SHAPES, RigidMotion, SceneRecipe, generate

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _variance_arg(text: str):
    if text in ("auto", "silverman"):
        return text
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number (m^2), 'auto' or 'silverman', got {text!r}") from None
    if not value > 0.0:
        raise argparse.ArgumentTypeError(f"variance must be positive, got {text}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _bounded_float(low: float, strict: bool, high: float | None = None, what: str = "value"):
    def parse(text: str) -> float:
        try:
            value = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
        below = value <= low if strict else value < low
        if below or (high is not None and not value < high) or value != value:
            raise argparse.ArgumentTypeError(f"{what}, got {text}")
        return value

    return parse


_positive = _bounded_float(0.0, True, what="must be positive")
_nonnegative = _bounded_float(0.0, False, what="must be nonnegative")
_fraction = _bounded_float(0.0, False, 1.0, what="must lie in [0, 1)")


def _add_optimizer_flags(p: argparse.ArgumentParser, losses_flag: bool = True) -> None:
    if losses_flag:
        p.add_argument("--loss", choices=LOSSES, default="cs", help="data term")
    p.add_argument("--lambda", dest="lam", type=_nonnegative, default=10.0, help="Laplacian regulariser weight (unitless)")
    p.add_argument(
        "--variance", type=_variance_arg, default="auto",
        help="shared mixture variance sigma^2 in m^2, or 'auto' / 'silverman' (cs loss)",
    )
    p.add_argument("--variance-source", type=_variance_arg, default=None, help="override --variance for the source (m^2)")
    p.add_argument("--variance-target", type=_variance_arg, default=None, help="override --variance for the target (m^2)")
    p.add_argument("--iters", type=_positive_int, default=300, help="maximum Adam iterations")
    p.add_argument("--lr", type=_positive, default=0.01, help="peak learning rate (m per step)")
    p.add_argument("--tolerance", type=_nonnegative, default=1e-6, help="relative objective change that counts as converged")
    p.add_argument("--k-graph", type=_positive_int, default=50, help="neighbours per point in the rigidity graph")
    p.add_argument("--emd-epsilon", type=_positive, default=0.01, help="entropic regularisation for the emd loss (m)")
    p.add_argument("--warm-start", action="store_true", help="initialise from voxel soft correspondences")
    p.add_argument("--workers", type=_positive_int, default=1, help="threads for pairwise tiles (results are order-independent)")
    p.add_argument(
        "--deterministic", action="store_true",
        help="reproducible output: ordered reductions and no wall-clock values in files",
    )


def _config(args, loss: str, seed: int) -> OptimizeConfig:
    return OptimizeConfig(
        loss=loss,
        lam=args.lam,
        variance_source=args.variance_source or args.variance,
        variance_target=args.variance_target or args.variance,
        learning_rate=args.lr,
        max_iters=args.iters,
        tolerance=args.tolerance,
        k_graph=args.k_graph,
        warm_start=args.warm_start,
        seed=seed,
        emd_epsilon=args.emd_epsilon,
        workers=1 if args.deterministic else args.workers,
    )


def _add_recipe_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--recipe", help="JSON file with scene settings (inline flags are then ignored)")
    p.add_argument("--n-points", type=_positive_int, default=2048, help="source points")
    p.add_argument("--shape", choices=SHAPES, default="uniform-box", help="scene geometry")
    p.add_argument(
        "--rotation", type=float, nargs=3, action="append", metavar=("RX", "RY", "RZ"),
        help="axis-angle rotation in radians about the object centroid; repeat once per object",
    )
    p.add_argument(
        "--translation", type=float, nargs=3, action="append", metavar=("TX", "TY", "TZ"),
        help="translation in meters; repeat once per object",
    )
    p.add_argument("--jitter", type=_nonnegative, default=0.0, help="Gaussian jitter sigma (m), applied to both clouds")
    p.add_argument("--outlier-fraction", type=_fraction, default=0.0, help="extra uniform target points, as a fraction of n-points")
    p.add_argument("--outlier-scale", type=_positive, default=5.0, help="outlier box side in scene diameters")
    p.add_argument("--drop-fraction", type=_fraction, default=0.0, help="fraction of target points removed")
    p.add_argument("--source-outliers", action="store_true", help="also add static clutter to the source")


def _recipe(args, seed: int) -> SceneRecipe:
    if args.recipe:
        with open(args.recipe, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        data["seed"] = seed
        return SceneRecipe.from_dict(data)
    rotations = args.rotation or []
    translations = args.translation or []
    n = max(len(rotations), len(translations), 1)
    if len(rotations) not in (0, n) or len(translations) not in (0, n):
        raise UsageError("--rotation and --translation must be given the same number of times")
    motion = tuple(
        RigidMotion(
            tuple(rotations[i]) if rotations else (0.0, 0.0, 0.0),
            tuple(translations[i]) if translations else (0.0, 0.0, 0.0),
        )
        for i in range(n)
    )
    return SceneRecipe(
        n_points=args.n_points,
        shape=args.shape,
        motion=motion,
        jitter_sigma=args.jitter,
        outlier_fraction=args.outlier_fraction,
        outlier_scale=args.outlier_scale,
        drop_fraction=args.drop_fraction,
        seed=seed,
        source_outliers=args.source_outliers,
    )


def cmd_estimate(args) -> int:
    source = read_cloud(args.source)
    target = read_cloud(args.target)
    report = estimate_flow(source, target, _config(args, args.loss, args.seed))
    write_flow(report.flow, args.out)
    summary = {
        "final_objective": report.final_objective,
        "iterations": report.iterations_run,
        "converged": str(report.converged).lower(),
    }
    if not args.deterministic:
        summary["wall_time_s"] = report.wall_time
    sys.stdout.write(format_metrics(summary))
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def cmd_eval(args) -> int:
    metrics = evaluate_flow(read_flow(args.flow), read_flow(args.truth))
    text = format_metrics(metrics)
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return EXIT_OK


def cmd_divergence(args) -> int:
    a = read_cloud(args.a)
    b = read_cloud(args.b)
    if args.loss == "cs":
        var_a = resolve_variance(a, args.variance)
        var_b = resolve_variance(b, args.variance)
        value = cs_divergence(a, b, GmmSpec(var_a, len(a)), GmmSpec(var_b, len(b))).value
    elif args.loss == "cd":
        value = chamfer_distance(a, b).value
    elif args.loss == "emd":
        value = emd_approx(a, b, epsilon=args.epsilon).value
    else:
        value = emd_exact(a, b)
    sys.stdout.write(format_metrics({"loss": args.loss, "value": float(value)}))
    return EXIT_OK


def cmd_gen(args) -> int:
    recipe = _recipe(args, args.seed)
    source, target, truth = generate(recipe)
    write_cloud(source, args.out_source)
    write_cloud(target, args.out_target)
    write_flow(truth, args.out_truth)
    sys.stdout.write(format_metrics({
        "source_points": len(source), "target_points": len(target), "objects": recipe.n_objects,
    }))
    return EXIT_OK


def _bench_run(job) -> dict:
    recipe, cfg, deterministic = job
    row = {"loss": cfg.loss, "seed": recipe.seed}
    try:
        source, target, truth = generate(recipe)
        start = time.perf_counter()
        report = estimate_flow(source, target, cfg)
        wall_ms = 1e3 * (time.perf_counter() - start)
        row.update(evaluate_flow(report.flow, truth).as_dict())
        row["status"] = "ok" if report.converged else "nonconverged"
        row["wall_ms"] = None if deterministic else wall_ms
    except (CsFlowError, ValueError, FloatingPointError, ArithmeticError) as exc:
        row.update(status="failed", error=str(exc))
    return row


def cmd_bench(args) -> int:
    losses = [s.strip() for s in args.losses.split(",") if s.strip()]
    bad = [s for s in losses if s not in LOSSES]
    if not losses or bad:
        raise UsageError(f"--losses must list values from {', '.join(LOSSES)}, got {args.losses!r}")
    jobs = [
        (_recipe(args, args.seed + r), _config(args, loss, args.seed + r), args.deterministic)
        for loss in losses
        for r in range(args.repeats)
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_bench_run, jobs))
    else:
        rows = [_bench_run(job) for job in jobs]
    # rows are in job order however they were scheduled; one writer emits them
    write_bench_csv(bench_rows_with_means(rows), args.out)
    for row in rows:
        if row["status"] == "failed":
            print(f"run loss={row['loss']} seed={row['seed']} failed: {row['error']}", file=sys.stderr)
    ok = all(any(r["loss"] == loss and r["status"] != "failed" for r in rows) for loss in losses)
    return EXIT_OK if ok else EXIT_ERROR


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="csflow", description="Scene flow between point clouds via Cauchy-Schwarz divergence.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("estimate", help="estimate flow from a source to a target cloud", formatter_class=fmt)
    p.add_argument("--source", required=True, help="source cloud (.xyz text or .ply ascii)")
    p.add_argument("--target", required=True, help="target cloud (.xyz text or .ply ascii)")
    p.add_argument("--out", required=True, help="output flow file (one vector in meters per line)")
    p.add_argument("--seed", type=int, default=0, help="recorded seed")
    _add_optimizer_flags(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("eval", help="score a flow against ground truth", formatter_class=fmt)
    p.add_argument("--flow", required=True, help="estimated flow file")
    p.add_argument("--truth", required=True, help="ground-truth flow file")
    p.add_argument("--out", default=None, help="also write the key=value metrics here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("divergence", help="compare two clouds with one data term", formatter_class=fmt)
    p.add_argument("--a", required=True, help="first cloud")
    p.add_argument("--b", required=True, help="second cloud")
    p.add_argument("--loss", choices=("cs", "cd", "emd", "emd-exact"), default="cs", help="measure")
    p.add_argument("--variance", type=_variance_arg, default="auto", help="mixture variance in m^2 for cs")
    p.add_argument("--epsilon", type=_positive, default=1e-3, help="entropic regularisation for emd (m)")
    p.set_defaults(func=cmd_divergence)

    p = sub.add_parser("gen", help="generate a synthetic scene with ground truth", formatter_class=fmt)
    _add_recipe_flags(p)
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out-source", required=True, help="source cloud path")
    p.add_argument("--out-target", required=True, help="target cloud path")
    p.add_argument("--out-truth", required=True, help="ground-truth flow path")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("bench", help="run losses over repeated synthetic scenes", formatter_class=fmt)
    _add_recipe_flags(p)
    p.add_argument("--losses", default="cs,cd,emd", help="comma-separated data terms")
    p.add_argument("--repeats", type=_positive_int, default=5, help="scenes per loss (seeds seed..seed+repeats-1)")
    p.add_argument("--seed", type=int, default=0, help="first scene seed")
    p.add_argument("--jobs", type=_positive_int, default=1, help="concurrent runs")
    p.add_argument("--out", required=True, help="output CSV")
    _add_optimizer_flags(p, losses_flag=False)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, CsFlowError, ValueError, OSError, FloatingPointError) as exc:
        print(f"csflow {args.command}: error: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
