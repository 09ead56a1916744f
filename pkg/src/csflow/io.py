"""Plain-text file formats for clouds, flows, metrics and benchmark results.

Formats
-------
xyz-text
    One point per line: three whitespace-separated decimal coordinates
    (meters), optionally followed by feature columns; every line must carry
    the same number of columns. Lines whose first non-blank character is
    ``#`` are comments; blank lines are skipped.
ply-ascii
    ASCII PLY with a ``vertex`` element holding float ``x``, ``y``, ``z``
    properties. Other vertex properties and other elements are ignored on
    read. Written files carry only ``x y z`` as doubles.
flow files
    xyz-text with exactly three columns, one displacement vector per line,
    written with 17 significant digits so a read returns the same doubles.
metrics
    One ``key=value`` pair per line.
benchmark CSV
    Header ``loss,seed,status,epe3d,acc3d_strict,acc3d_relaxed,outliers3d,wall_ms``.
    ``status`` is ``ok``, ``nonconverged`` (the run hit ``max_iters``; metrics
    are still valid) or ``failed`` (metric cells empty). After the per-run
    rows comes one row per loss with ``seed`` set to ``mean`` and the averages
    over its successful runs; ``status`` there holds the count ``n=<k>``.
    ``wall_ms`` is left empty when timings are suppressed for reproducible
    output.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from csflow.core import CsFlowError, DimensionError, FlowField, FlowMetrics, PointCloud, _vectors

FORMATS = ("xyz-text", "ply-ascii")
BENCH_HEADER = ("loss", "seed", "status", "epe3d", "acc3d_strict", "acc3d_relaxed", "outliers3d", "wall_ms")
METRIC_KEYS = ("epe3d", "acc3d_strict", "acc3d_relaxed", "outliers3d")


class ParseError(CsFlowError, ValueError):
    """A file could not be parsed; ``line`` is the 1-based offending line, if known."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = str(path) if path is not None else "<input>"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}")
        self.path = path
        self.line = line


def infer_format(path) -> str:
    return "ply-ascii" if Path(path).suffix.lower() == ".ply" else "xyz-text"


def _check_format(fmt: str | None, path) -> str:
    fmt = fmt or infer_format(path)
    if fmt not in FORMATS:
        raise ValueError(f"unknown cloud format {fmt!r}; choose from {', '.join(FORMATS)}")
    return fmt


def _parse_row(text: str, path, lineno: int) -> list[float]:
    try:
        row = [float(tok) for tok in text.split()]
    except ValueError as exc:
        raise ParseError(f"not a number ({exc})", path, lineno) from None
    if not all(math.isfinite(v) for v in row):
        raise ParseError("non-finite value", path, lineno)
    return row


def _parse_xyz(lines, path) -> tuple[np.ndarray, np.ndarray | None]:
    rows = []
    width = None
    for lineno, raw in enumerate(lines, start=1):
        text = raw.strip()
        if not text or text.startswith("#"):
            continue
        row = _parse_row(text, path, lineno)
        if len(row) < 3:
            raise ParseError(f"expected at least 3 columns, found {len(row)}", path, lineno)
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ParseError(f"expected {width} columns like the first point, found {len(row)}", path, lineno)
        rows.append(row)
    if not rows:
        raise DimensionError(f"{path}: no points in file")
    data = np.array(rows, dtype=np.float64)
    features = data[:, 3:] if width > 3 else None
    return data[:, :3], features


def _parse_ply(lines, path) -> np.ndarray:
    lines = list(lines)
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic line", path, 1)
    elements = []  # [name, count, [property names]]
    end = None
    for lineno, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise ParseError("only 'format ascii 1.0' is supported", path, lineno)
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise ParseError("malformed element line", path, lineno)
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before any element", path, lineno)
            if len(tok) >= 2 and tok[1] == "list":
                raise ParseError("list properties are not supported", path, lineno)
            if len(tok) != 3:
                raise ParseError("malformed property line", path, lineno)
            elements[-1][2].append(tok[2])
        elif tok[0] == "end_header":
            end = lineno
            break
        else:
            raise ParseError(f"unexpected header keyword {tok[0]!r}", path, lineno)
    if end is None:
        raise ParseError("header has no end_header", path, len(lines))

    cursor = end  # 0-based index of the first body line
    points = None
    for name, count, props in elements:
        block = []
        for _ in range(count):
            while cursor < len(lines) and not lines[cursor].strip():
                cursor += 1
            if cursor >= len(lines):
                raise ParseError(f"file ended inside element {name!r}", path, len(lines))
            row = _parse_row(lines[cursor], path, cursor + 1)
            if len(row) != len(props):
                raise ParseError(f"expected {len(props)} values, found {len(row)}", path, cursor + 1)
            block.append(row)
            cursor += 1
        if name == "vertex":
            missing = [p for p in "xyz" if p not in props]
            if missing:
                raise ParseError(f"vertex element lacks properties {missing}", path, end)
            cols = [props.index(p) for p in "xyz"]
            points = np.array(block, dtype=np.float64).reshape(count, len(props))[:, cols]
    if points is None or len(points) == 0:
        raise DimensionError(f"{path}: no vertices in file")
    return points


def read_cloud(path, fmt: str | None = None) -> PointCloud:
    """Read a cloud; the format follows the extension (``.ply``) unless given."""
    fmt = _check_format(fmt, path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    if fmt == "ply-ascii":
        return PointCloud(_parse_ply(lines, path))
    points, features = _parse_xyz(lines, path)
    return PointCloud(points, features)


def _fmt(v: float) -> str:
    return "%.17g" % v


def write_cloud(cloud: PointCloud, path, fmt: str | None = None) -> None:
    fmt = _check_format(fmt, path)
    pts = cloud.points
    with open(path, "w", encoding="utf-8") as fh:
        if fmt == "ply-ascii":
            fh.write(
                "ply\nformat ascii 1.0\n"
                f"element vertex {len(pts)}\n"
                "property double x\nproperty double y\nproperty double z\nend_header\n"
            )
            data = pts
        else:
            data = pts if cloud.features is None else np.hstack([pts, cloud.features])
        for row in data:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")


def write_flow(flow: FlowField, path) -> None:
    """Write one vector per line at 17 significant digits (exact round trip)."""
    vec = _vectors(flow)
    if vec.ndim != 2 or vec.shape[1] != 3 or len(vec) == 0:
        raise DimensionError("cannot write an empty flow")
    if not np.all(np.isfinite(vec)):
        raise ValueError("flow contains non-finite values")
    with open(path, "w", encoding="utf-8") as fh:
        for row in vec:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")


def read_flow(path) -> FlowField:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    vectors, extra = _parse_xyz(lines, path)
    if extra is not None:
        raise ParseError(f"flow files have 3 columns, found {3 + extra.shape[1]}", path, None)
    return FlowField(vectors)


def format_metrics(values) -> str:
    """``key=value`` lines; accepts a FlowMetrics or any mapping."""
    items = values.as_dict() if isinstance(values, FlowMetrics) else dict(values)
    lines = []
    for key, val in items.items():
        if "=" in str(key) or "\n" in str(key):
            raise ValueError(f"metric key {key!r} cannot contain '=' or newlines")
        lines.append(f"{key}={_fmt(val) if isinstance(val, float) else val}")
    return "\n".join(lines) + "\n"


def write_metrics(values, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_metrics(values))


def parse_metrics(text: str) -> dict[str, float | str]:
    """Inverse of :func:`format_metrics`; numeric values come back as floats."""
    out: dict[str, float | str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep or not key.strip():
            raise ParseError("expected key=value", None, lineno)
        val = val.strip()
        try:
            out[key.strip()] = float(val)
        except ValueError:
            out[key.strip()] = val
    return out


def read_metrics(path) -> dict[str, float | str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_metrics(fh.read())


def bench_rows_with_means(rows: list[dict]) -> list[dict]:
    """Append one ``seed=mean`` row per loss (in first-seen order) to benchmark rows."""
    out = list(rows)
    losses = list(dict.fromkeys(r["loss"] for r in rows))
    for loss in losses:
        good = [r for r in rows if r["loss"] == loss and r["status"] != "failed"]
        mean = {"loss": loss, "seed": "mean", "status": f"n={len(good)}"}
        for key in METRIC_KEYS + ("wall_ms",):
            vals = [r[key] for r in good if r.get(key) not in (None, "")]
            mean[key] = float(np.mean(vals)) if vals else None
        out.append(mean)
    return out


def write_bench_csv(rows: list[dict], path) -> None:
    """Write benchmark rows under :data:`BENCH_HEADER`; ``None`` becomes an empty cell."""

    def cell(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return _fmt(v)
        return str(v)

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(BENCH_HEADER)
        for row in rows:
            writer.writerow([cell(row.get(k)) for k in BENCH_HEADER])
