import numpy as np
import pytest

from oracles import arc_length_quadrature, de_boor
from quadplan.bspline import (
    BSplineTrajectory,
    SplineOptConfig,
    arc_length,
    clearance_cost,
    eval_spline,
    fit_control_points,
    optimize_spline,
    smoothness_cost,
    to_reference,
    uniformity_cost,
)
from quadplan.kinodynamic import SearchTrajectory
from quadplan.world import OccupancyGrid, build_esdf, distance_query, rasterize_cylinders


def line_points(n, step=1.0):
    return np.outer(np.arange(n), (step, 0.0, 0.0))


def circle_points(n, radius=2.0, dphi=0.3):
    phi = dphi * np.arange(n)
    return np.column_stack([radius * np.cos(phi), radius * np.sin(phi), np.zeros(n)])


def fd_grad(f, P, h=1e-6):
    G = np.zeros_like(P)
    for idx in np.ndindex(P.shape):
        Pp, Pm = P.copy(), P.copy()
        Pp[idx] += h
        Pm[idx] -= h
        G[idx] = (f(Pp) - f(Pm)) / (2 * h)
    return G


class TestEvaluation:
    def test_constant_points(self):
        b = BSplineTrajectory(np.tile((1.0, -2.0, 3.0), (7, 1)), 0.5)
        (p, v, a), _ = eval_spline(b, np.linspace(b.t_start, b.t_end, 11))
        assert np.allclose(p, (1, -2, 3), atol=1e-14) and np.allclose(v, 0) and np.allclose(a, 0)

    def test_collinear_unit_speed(self):
        b = BSplineTrajectory(line_points(8), 1.0)
        (p, v, _), _ = eval_spline(b, np.linspace(0.0, b.t_end, 23))
        assert np.allclose(v, (1, 0, 0), atol=1e-12)
        assert np.allclose(p[:, 0], 1.0 + np.linspace(0.0, b.t_end, 23), atol=1e-12)

    def test_matches_de_boor(self):
        rng = np.random.default_rng(0)
        P = rng.normal(size=(10, 3))
        b = BSplineTrajectory(P, 0.7, 1.3)
        for t in rng.uniform(b.t_start, b.t_end, 100):
            assert np.allclose(eval_spline(b, t, 0)[0][0], de_boor(P, 0.7, 1.3, t), atol=1e-10)

    def test_derivatives_by_difference(self):
        rng = np.random.default_rng(1)
        b = BSplineTrajectory(rng.normal(size=(9, 3)), 0.4)
        for t in rng.uniform(b.t_start + 0.01, b.t_end - 0.01, 20):
            (p, v, a), _ = eval_spline(b, t)
            h = 1e-6
            vp = (eval_spline(b, t + h, 0)[0][0] - eval_spline(b, t - h, 0)[0][0]) / (2 * h)
            ap = (eval_spline(b, t + h, 1)[0][1] - eval_spline(b, t - h, 1)[0][1]) / (2 * h)
            assert np.allclose(v, vp, atol=1e-6) and np.allclose(a, ap, atol=1e-5)

    def test_out_of_domain_clamped(self):
        b = BSplineTrajectory(line_points(6), 1.0)
        (p,), flag = eval_spline(b, b.t_end + 3.0, 0)
        assert flag and np.allclose(p, eval_spline(b, b.t_end, 0)[0][0])

    def test_derivative_identity_on_zero_second_difference_span(self):
        # P_{k-3}, P_{k-2}, P_{k-1} collinear and equally spaced on one span
        P = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [5, 3, 1], [6, 2, 0], [7, 7, 7]], float)
        b = BSplineTrajectory(P, 0.5)
        # span [t_3, t_4] uses P_0..P_3; its start velocity is (P_2 - P_0) / (2 dt)
        v0 = eval_spline(b, b.t_start, 1)[0][1]
        assert np.allclose(v0, (P[2] - P[0]) / (2 * 0.5), atol=1e-9)

    def test_needs_six_points(self):
        with pytest.raises(ValueError):
            BSplineTrajectory(line_points(5), 1.0)


class TestCosts:
    def test_smoothness_examples(self):
        assert smoothness_cost(line_points(6))[0] == 0.0
        P = np.array([[0, 0, 0], [1, 0, 0], [3, 0, 0], [9, 9, 9]], float)
        # four points give the single term ||P0 - 2 P1 + P2||
        assert smoothness_cost(P)[0] == pytest.approx(1.0)

    def test_uniformity_examples(self):
        assert uniformity_cost(line_points(6))[0] == 0.0
        P = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [4, 0, 0], [4, 0, 0]], float)
        # five points give the single term | ||P2 - P0|| - ||P3 - P1|| | = |2 - 3|
        assert uniformity_cost(P)[0] == pytest.approx(1.0)

    def test_zero_for_equal_angle_circle(self):
        assert uniformity_cost(circle_points(9))[0] == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("cost", [smoothness_cost, uniformity_cost])
    def test_gradients_match_finite_differences(self, cost):
        rng = np.random.default_rng(2)
        for _ in range(5):
            P = rng.normal(size=(8, 3))
            _, g = cost(P)
            fd = fd_grad(lambda Q: cost(Q)[0], P)
            assert np.allclose(g, fd, rtol=1e-5, atol=1e-7)

    def test_clearance_gradient(self):
        g = rasterize_cylinders(OccupancyGrid.empty(0.1, (0, 0, 0), (60, 40, 20)), [(3.0, 2.0, 0.6, 2.0)])
        df = build_esdf(g)
        rng = np.random.default_rng(3)
        P = np.column_stack([np.linspace(1, 5, 9), 2.0 + rng.uniform(0.4, 0.7, 9), np.full(9, 1.03)])
        val, grad = clearance_cost(P, df, 0.8)
        assert val > 0
        fd = fd_grad(lambda Q: clearance_cost(Q, df, 0.8)[0], P)
        assert np.allclose(grad, fd, rtol=1e-5, atol=1e-6)

    def test_clearance_inactive_far_away(self):
        df = build_esdf(OccupancyGrid.from_indices(0.5, (0, 0, 0), (40, 40, 4), [(0, 0, 0)]))
        P = np.column_stack([np.linspace(10, 15, 8), np.full(8, 10.0), np.full(8, 1.0)])
        val, grad = clearance_cost(P, df, 0.8)
        assert val == 0.0 and not grad.any()

    def test_clearance_index_range(self):
        g = OccupancyGrid.from_indices(0.5, (0, 0, 0), (20, 4, 4), [(i, 0, 0) for i in range(20)])
        df = build_esdf(g)
        P = np.column_stack([np.linspace(0.5, 9.5, 9), np.full(9, 0.25), np.full(9, 0.25)])
        _, grad = clearance_cost(P, df, 5.0)
        nb = len(P) - 1
        assert not grad[:3].any() and not grad[nb - 2 :].any()
        assert grad[3 : nb - 2].any()


class TestFit:
    def test_line_reproduced(self):
        tr = SearchTrajectory((0, 0, 1), (1, 0.5, 0), [(0.5, (0, 0, 0))] * 8)
        b = fit_control_points(tr, 10)
        for t in np.linspace(0, tr.duration, 50):
            assert np.allclose(eval_spline(b, t, 0)[0][0], tr.position(t), atol=1e-9)

    def test_stationary(self):
        b = fit_control_points(SearchTrajectory((1, 2, 3), (0, 0, 0), []), 7)
        assert np.allclose(b.control_points, (1, 2, 3))

    def test_endpoints_interpolated(self):
        tr = SearchTrajectory((0, 0, 1), (0, 0, 0), [(0.5, (2, 1, 0)), (0.5, (0, -2, 0)), (0.5, (-2, 1, 0))])
        b = fit_control_points(tr, 8)
        assert np.allclose(eval_spline(b, 0.0, 0)[0][0], tr.position(0.0), atol=1e-12)
        assert np.allclose(eval_spline(b, b.t_end, 0)[0][0], tr.position(tr.duration), atol=1e-12)

    def test_random_smooth_input_within_sampling_bound(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            segs = [(0.5, rng.uniform(-2, 2, 3)) for _ in range(6)]
            tr = SearchTrajectory((0, 0, 1), rng.uniform(-1, 1, 3), segs)
            a_max = max(np.linalg.norm(a) for _, a in segs)
            ts = np.linspace(0, tr.duration, 600)
            for n in (8, 16, 32):
                b = fit_control_points(tr, n)
                h = tr.duration / (n - 1)
                err = max(np.linalg.norm(eval_spline(b, t, 0)[0][0] - tr.position(t)) for t in ts)
                # curvature times squared sample spacing bounds what sampling can miss
                assert err <= a_max * h * h


@pytest.fixture(scope="module")
def obstacle_case():
    g = rasterize_cylinders(OccupancyGrid.empty(0.1, (0, 0, 0), (100, 60, 30)), [(5.0, 3.1, 0.5, 3.0)])
    df = build_esdf(g)
    tr = SearchTrajectory((1, 3, 1), (0, 0, 0), [(0.5, (2, 0, 0))] * 2 + [(0.5, (0, 0, 0))] * 6
                          + [(0.5, (-2, 0, 0))] * 2)
    init = fit_control_points(tr, 14)
    cfg = SplineOptConfig(d_thr=0.6)
    res = optimize_spline(init, df, cfg, tr.position(0), tr.position(tr.duration), return_info=True)
    return df, cfg, tr, res


class TestOptimize:
    def test_optimal_line_unchanged(self):
        b = BSplineTrajectory(line_points(10) - (1, 0, 0), 0.5)
        ps = eval_spline(b, b.t_start, 0)[0][0]
        pg = eval_spline(b, b.t_end, 0)[0][0]
        out = optimize_spline(b, None, SplineOptConfig(), ps, pg)
        assert np.allclose(out.control_points, b.control_points, atol=1e-9)

    def test_clearance_reached(self, obstacle_case):
        df, cfg, _, res = obstacle_case
        P = res.spline.control_points
        d = distance_query(df, P[3 : len(P) - 3])[0]
        assert np.all(d >= cfg.d_thr - 0.05)

    def test_endpoints_exact(self, obstacle_case):
        _, _, tr, res = obstacle_case
        b = res.spline
        assert np.allclose(eval_spline(b, b.t_start, 0)[0][0], tr.position(0), atol=1e-12)
        assert np.allclose(eval_spline(b, b.t_end, 0)[0][0], tr.position(tr.duration), atol=1e-12)

    def test_objective_monotone(self, obstacle_case):
        trace = np.array(obstacle_case[3].objective_trace)
        assert np.all(np.diff(trace) <= 0.0)

    def test_rejects_non_finite(self):
        b = BSplineTrajectory(np.full((7, 3), np.nan), 1.0)
        with pytest.raises(ValueError):
            optimize_spline(b, None, SplineOptConfig(), (0, 0, 0), (1, 0, 0))


class TestReference:
    def test_straight_midpoint(self):
        b = BSplineTrajectory(line_points(13) - (1, 0, 0), 1.0)
        ref = to_reference(b)
        assert ref.length == pytest.approx(10.0, rel=1e-12)
        assert np.allclose(ref.position(5.0), (5, 0, 0), atol=1e-12)
        assert ref.uniformity_residual < 1e-9

    def test_endpoints(self):
        rng = np.random.default_rng(4)
        b = BSplineTrajectory(np.cumsum(rng.uniform(0.2, 1, (9, 3)), axis=0), 0.3)
        ref = to_reference(b)
        assert np.allclose(ref.position(0.0), eval_spline(b, b.t_start, 0)[0][0])
        assert np.allclose(ref.end_point, eval_spline(b, b.t_end, 0)[0][0])

    def test_non_uniform_reports_residual(self):
        P = np.outer([0, 1, 2, 4, 8, 9, 10, 12], (1, 0, 0))
        ref = to_reference(BSplineTrajectory(P, 1.0))
        assert ref.uniformity_residual > 0.05
        assert np.all(np.isfinite(ref.position(np.linspace(0, ref.length, 50))))

    def test_length_matches_quadrature(self):
        rng = np.random.default_rng(5)
        b = BSplineTrajectory(rng.normal(size=(9, 3)), 0.6)
        expect = arc_length_quadrature(lambda s: eval_spline(b, s, 1)[0][1], b.t_start, b.t_end)
        assert arc_length(b) == pytest.approx(expect, rel=1e-8)

    def test_zero_length_rejected(self):
        with pytest.raises(ValueError):
            to_reference(BSplineTrajectory(np.zeros((6, 3)), 1.0))

    def test_csv_export(self, tmp_path):
        ref = to_reference(BSplineTrajectory(line_points(8), 1.0))
        ref.export_csv(tmp_path / "r.csv", 0.5)
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "theta,x,y,z,tx,ty,tz" and len(lines) == 1 + 11
