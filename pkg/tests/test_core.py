import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from csflow.core import (
    DimensionError,
    FlowField,
    GmmSpec,
    MetricThresholds,
    ParameterError,
    PointCloud,
    evaluate_flow,
    warp,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def flows(n):
    return arrays(np.float64, (n, 3), elements=finite)


class TestPointCloud:
    def test_rejects_empty(self):
        with pytest.raises(DimensionError):
            PointCloud(np.zeros((0, 3)))

    def test_rejects_bad_shape(self):
        with pytest.raises(DimensionError):
            PointCloud(np.zeros((4, 2)))

    def test_rejects_non_finite(self):
        with pytest.raises(ParameterError):
            PointCloud([[0.0, np.nan, 0.0]])

    def test_feature_rows_must_match(self):
        with pytest.raises(DimensionError):
            PointCloud(np.zeros((3, 3)), features=np.zeros((2, 4)))

    def test_immutable(self):
        c = PointCloud(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            c.points[0, 0] = 1.0

    def test_input_is_copied(self):
        raw = np.zeros((2, 3))
        c = PointCloud(raw)
        raw[0, 0] = 5.0
        assert c.points[0, 0] == 0.0


class TestGmmSpec:
    def test_weight_is_reciprocal_count(self):
        spec = GmmSpec(0.01, 8)
        assert spec.weight == 1.0 / 8
        assert spec.log_weight == pytest.approx(-np.log(8))

    @pytest.mark.parametrize("variance", [0.0, -1.0, np.inf, np.nan])
    def test_rejects_bad_variance(self, variance):
        with pytest.raises(ParameterError):
            GmmSpec(variance, 3)


class TestWarp:
    def test_zero_flow_single_point(self):
        out = warp(PointCloud([[0.0, 0.0, 0.0]]), FlowField([[0.0, 0.0, 0.0]]))
        assert np.array_equal(out.points, [[0.0, 0.0, 0.0]])

    def test_componentwise_addition(self):
        out = warp(PointCloud([[1.0, 2.0, 3.0]]), FlowField([[0.1, 0.0, -0.5]]))
        np.testing.assert_allclose(out.points, [[1.1, 2.0, 2.5]], rtol=0, atol=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            warp(PointCloud(np.zeros((4, 3))), FlowField(np.zeros((3, 3))))

    def test_features_carried(self):
        c = PointCloud(np.zeros((2, 3)), features=[[1.0], [2.0]])
        out = warp(c, FlowField(np.ones((2, 3))))
        assert np.array_equal(out.features, c.features)

    @given(flows(5))
    def test_zero_flow_is_exact_identity(self, pts):
        c = PointCloud(pts)
        assert np.array_equal(warp(c, FlowField.zeros(5)).points, c.points)


class TestEvaluateFlow:
    def test_perfect_estimate(self):
        gt = FlowField(np.tile([0.3, -0.2, 0.1], (6, 1)))
        m = evaluate_flow(gt, gt)
        assert (m.epe3d, m.acc3d_strict, m.acc3d_relaxed, m.outliers3d) == (0.0, 1.0, 1.0, 0.0)

    def test_small_uniform_error(self):
        gt = FlowField(np.tile([1.0, 0.0, 0.0], (10, 1)))
        est = FlowField(np.tile([1.04, 0.0, 0.0], (10, 1)))
        m = evaluate_flow(est, gt)
        # 1.04 - 1.0 is not exactly 0.04 in binary floating point
        assert m.epe3d == 1.04 - 1.0
        assert m.epe3d == pytest.approx(0.04, abs=1e-15)
        assert m.acc3d_strict == 1.0

    def test_single_outlier(self):
        m = evaluate_flow(FlowField([[1.5, 0.0, 0.0]]), FlowField([[1.0, 0.0, 0.0]]))
        assert m.epe3d == 0.5
        assert m.outliers3d == 1.0
        assert m.acc3d_strict == 0.0 and m.acc3d_relaxed == 0.0

    def test_static_points_use_absolute_thresholds_only(self):
        gt = FlowField(np.zeros((2, 3)))
        est = FlowField([[0.01, 0.0, 0.0], [0.2, 0.0, 0.0]])
        m = evaluate_flow(est, gt)
        assert m.acc3d_strict == 0.5
        assert m.acc3d_relaxed == 0.5
        assert m.outliers3d == 0.0

    def test_relative_criterion(self):
        # error 0.2 m on a 5 m motion: 4% relative, so strict accuracy holds
        m = evaluate_flow(FlowField([[5.2, 0.0, 0.0]]), FlowField([[5.0, 0.0, 0.0]]))
        assert m.acc3d_strict == 1.0
        assert m.outliers3d == 0.0

    def test_custom_thresholds(self):
        m = evaluate_flow(
            FlowField([[1.04, 0.0, 0.0]]), FlowField([[1.0, 0.0, 0.0]]),
            MetricThresholds(strict_abs=0.01, strict_rel=0.01),
        )
        assert m.acc3d_strict == 0.0

    @pytest.mark.parametrize("shapes", [((3, 3), (4, 3)), ((0, 3), (0, 3))])
    def test_bad_lengths(self, shapes):
        with pytest.raises(DimensionError):
            evaluate_flow(np.zeros(shapes[0]), np.zeros(shapes[1]))

    @settings(max_examples=50)
    @given(flows(7), flows(7), st.permutations(range(7)))
    def test_invariants(self, est, gt, perm):
        m = evaluate_flow(est, gt)
        assert m.epe3d >= 0.0
        assert 0.0 <= m.acc3d_strict <= m.acc3d_relaxed <= 1.0
        assert 0.0 <= m.outliers3d <= 1.0
        p = np.array(perm)
        assert evaluate_flow(est[p], gt[p]) == m
        assert evaluate_flow(est, est).epe3d == 0.0
