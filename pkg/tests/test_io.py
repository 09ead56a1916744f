import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from csflow.core import DimensionError, FlowField, FlowMetrics, PointCloud
from csflow.io import (
    BENCH_HEADER,
    ParseError,
    bench_rows_with_means,
    format_metrics,
    parse_metrics,
    read_cloud,
    read_flow,
    read_metrics,
    write_bench_csv,
    write_cloud,
    write_flow,
    write_metrics,
)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestReadCloud:
    def test_two_points(self, tmp_path):
        c = read_cloud(write(tmp_path, "a.xyz", "0 0 0\n1 2 3\n"))
        assert c.points.tolist() == [[0, 0, 0], [1, 2, 3]]
        assert c.features is None

    def test_short_line(self, tmp_path):
        with pytest.raises(ParseError) as info:
            read_cloud(write(tmp_path, "a.xyz", "1 2\n"))
        assert info.value.line == 1

    def test_comment(self, tmp_path):
        assert len(read_cloud(write(tmp_path, "a.xyz", "# comment\n0 0 0\n"))) == 1

    def test_features(self, tmp_path):
        c = read_cloud(write(tmp_path, "a.xyz", "0 0 0 5 6\n1 1 1 7 8\n"))
        assert c.features.tolist() == [[5, 6], [7, 8]]

    def test_ragged_columns(self, tmp_path):
        with pytest.raises(ParseError) as info:
            read_cloud(write(tmp_path, "a.xyz", "# x\n0 0 0 1\n0 0 0\n"))
        assert info.value.line == 3

    @pytest.mark.parametrize("bad", ["nan", "inf", "-Infinity", "abc"])
    def test_bad_numbers(self, tmp_path, bad):
        with pytest.raises(ParseError) as info:
            read_cloud(write(tmp_path, "a.xyz", f"0 0 0\n1 {bad} 0\n"))
        assert info.value.line == 2

    @pytest.mark.parametrize("text", ["", "# only a comment\n\n"])
    def test_empty(self, tmp_path, text):
        with pytest.raises(DimensionError):
            read_cloud(write(tmp_path, "a.xyz", text))

    def test_ply(self, tmp_path):
        text = (
            "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\n"
            "property float y\nproperty float x\nproperty uchar red\nproperty float z\n"
            "element face 0\nproperty float dummy\nend_header\n"
            "2 1 255 3\n5 4 0 6\n"
        )
        c = read_cloud(write(tmp_path, "a.ply", text))
        assert c.points.tolist() == [[1, 2, 3], [4, 5, 6]]

    def test_ply_binary_rejected(self, tmp_path):
        with pytest.raises(ParseError) as info:
            read_cloud(write(tmp_path, "a.ply", "ply\nformat binary_little_endian 1.0\nend_header\n"))
        assert info.value.line == 2

    def test_ply_short_body(self, tmp_path):
        text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n"
        with pytest.raises(ParseError):
            read_cloud(write(tmp_path, "a.ply", text))


class TestRoundTrips:
    @settings(max_examples=25)
    @given(arrays(np.float64, st.tuples(st.integers(1, 20), st.just(3)),
                  elements=st.floats(allow_nan=False, allow_infinity=False, width=64)))
    def test_flow_exact(self, tmp_path_factory, vec):
        path = tmp_path_factory.mktemp("flow") / "f.xyz"
        write_flow(FlowField(vec), path)
        assert np.array_equal(read_flow(path).vectors, vec)

    def test_empty_flow(self, tmp_path):
        with pytest.raises(DimensionError):
            write_flow(FlowField(np.zeros((0, 3))), tmp_path / "f.xyz")

    def test_unwritable(self, tmp_path):
        with pytest.raises(OSError):
            write_flow(FlowField(np.zeros((1, 3))), tmp_path / "missing" / "f.xyz")

    @pytest.mark.parametrize("name", ["c.xyz", "c.ply"])
    def test_cloud(self, tmp_path, rng, name):
        c = PointCloud(rng.normal(size=(10, 3)) * 1e3)
        write_cloud(c, tmp_path / name)
        assert np.array_equal(read_cloud(tmp_path / name).points, c.points)

    def test_cloud_features(self, tmp_path, rng):
        c = PointCloud(rng.normal(size=(4, 3)), features=rng.normal(size=(4, 2)))
        write_cloud(c, tmp_path / "c.xyz")
        assert np.array_equal(read_cloud(tmp_path / "c.xyz").features, c.features)

    def test_metrics(self, tmp_path):
        m = FlowMetrics(0.1234567890123, 0.5, 0.75, 0.0)
        write_metrics(m, tmp_path / "m.txt")
        assert read_metrics(tmp_path / "m.txt") == m.as_dict()
        assert format_metrics(m).splitlines()[0].startswith("epe3d=")

    def test_metrics_bad_line(self):
        with pytest.raises(ParseError):
            parse_metrics("epe3d=0.1\nnonsense\n")


def test_bench_csv(tmp_path):
    rows = [
        {"loss": "cs", "seed": 0, "status": "ok", "epe3d": 0.1, "acc3d_strict": 1.0, "acc3d_relaxed": 1.0,
         "outliers3d": 0.0, "wall_ms": 5.0},
        {"loss": "cs", "seed": 1, "status": "failed"},
        {"loss": "cs", "seed": 2, "status": "nonconverged", "epe3d": 0.3, "acc3d_strict": 0.0,
         "acc3d_relaxed": 0.5, "outliers3d": 1.0, "wall_ms": None},
    ]
    write_bench_csv(bench_rows_with_means(rows), tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == ",".join(BENCH_HEADER)
    assert lines[2] == "cs,1,failed,,,,,"
    mean = lines[4].split(",")
    assert mean[:3] == ["cs", "mean", "n=2"]
    assert float(mean[3]) == pytest.approx(0.2)
    assert float(mean[7]) == 5.0
