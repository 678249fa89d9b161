import json

import numpy as np
import pytest

from oracles import brute_force_distance
from quadplan.world import (
    SENTINEL,
    BackAndForth,
    ConstantVelocity,
    DynamicEllipsoid,
    OccupancyGrid,
    Pendulum,
    build_esdf,
    distance_query,
    obstacle_position_at,
    rasterize_cylinders,
    squared_cell_distance,
)


def random_grid(rng, max_side=32, max_obs=64, resolution=1.0):
    dims = tuple(int(d) for d in rng.integers(1, max_side + 1, 3))
    n = int(rng.integers(1, max_obs + 1))
    idx = np.column_stack([rng.integers(0, d, n) for d in dims])
    return OccupancyGrid.from_indices(resolution, (0.0, 0.0, 0.0), dims, idx)


class TestGrid:
    def test_rejects_bad_resolution(self):
        with pytest.raises(ValueError):
            OccupancyGrid.empty(0.0, (0, 0, 0), (2, 2, 2))

    def test_rejects_out_of_range_index(self):
        with pytest.raises(ValueError):
            OccupancyGrid.from_indices(1.0, (0, 0, 0), (2, 2, 2), [(2, 0, 0)])

    def test_json_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        g = random_grid(rng, 12, 30, 0.25)
        path = tmp_path / "grid.json"
        g.save(path)
        back = OccupancyGrid.load(path)
        assert back.dims == g.dims and back.resolution == g.resolution
        assert np.array_equal(back.occupied, g.occupied)
        assert "occupied_runs" in json.loads(path.read_text())

    def test_out_of_bounds_is_not_free(self):
        g = OccupancyGrid.empty(1.0, (0, 0, 0), (3, 3, 3))
        assert g.is_free((1.5, 1.5, 1.5))
        assert not g.is_free((-0.1, 1.0, 1.0))

    def test_rasterize_cylinder_marks_cells_inside_only(self):
        g = rasterize_cylinders(OccupancyGrid.empty(0.1, (0, 0, 0), (40, 40, 20)), [(2.0, 2.0, 0.5, 1.0)])
        centers = g.cell_center(g.occupied_indices)
        r = np.hypot(centers[:, 0] - 2.0, centers[:, 1] - 2.0)
        assert np.all(r <= 0.25) and np.all(centers[:, 2] <= 1.0)
        assert g.occupied.sum() > 0


class TestEsdf:
    def test_empty_grid_gives_sentinel(self):
        df = build_esdf(OccupancyGrid.empty(1.0, (0, 0, 0), (4, 4, 4)))
        assert np.all(df.distance == SENTINEL)
        assert SENTINEL == np.finfo(float).max

    def test_three_four_five(self):
        g = OccupancyGrid.from_indices(1.0, (0, 0, 0), (6, 6, 2), [(0, 0, 0)])
        assert build_esdf(g).distance[3, 4, 0] == 5.0

    def test_occupied_cells_are_zero(self):
        g = random_grid(np.random.default_rng(1), 16, 20)
        df = build_esdf(g)
        assert np.all(df.distance[g.occupied] == 0.0)
        assert np.all(df.distance >= 0.0)

    def test_matches_brute_force_exactly(self):
        rng = np.random.default_rng(7)
        for _ in range(8):
            g = OccupancyGrid.from_indices(1.0, (0, 0, 0), (32, 32, 32),
                                           rng.integers(0, 32, (20, 3)))
            assert np.array_equal(build_esdf(g).distance, brute_force_distance(g.occupied, 1.0))

    def test_squared_distances_are_integers(self):
        g = random_grid(np.random.default_rng(2), 10, 10)
        sq = squared_cell_distance(g.occupied)
        assert np.array_equal(sq, np.round(sq))

    def test_reflection_symmetry(self):
        g = random_grid(np.random.default_rng(11), 20, 30)
        flipped = OccupancyGrid(1.0, g.origin, g.dims, g.occupied[::-1])
        assert np.array_equal(build_esdf(flipped).distance, build_esdf(g).distance[::-1])

    def test_lipschitz_between_neighbours(self):
        df = build_esdf(random_grid(np.random.default_rng(5), 16, 10, 0.2))
        for axis in range(3):
            diff = np.abs(np.diff(df.distance, axis=axis))
            assert np.all(diff <= 0.2 * np.sqrt(3) + 1e-12)


class TestDistanceQuery:
    def setup_method(self):
        self.grid = random_grid(np.random.default_rng(9), 14, 12, 0.5)
        self.df = build_esdf(self.grid)

    def test_cell_center_identity(self):
        idx = (3, 2, 1)
        idx = tuple(min(i, d - 1) for i, d in zip(idx, self.grid.dims))
        d, _, clamped = distance_query(self.df, self.grid.cell_center(idx))
        assert d == pytest.approx(self.df.distance[idx], abs=1e-12)
        assert not clamped

    def test_midpoint_of_two_values(self):
        g = OccupancyGrid.from_indices(1.0, (0, 0, 0), (4, 1, 1), [(0, 0, 0)])
        df = build_esdf(g)  # distances 0, 1, 2, 3 along x
        d, grad, _ = distance_query(df, (2.0, 0.5, 0.5))
        assert d == pytest.approx(1.5)
        assert grad[0] == pytest.approx(1.0)

    def test_matches_eight_corner_oracle(self):
        rng = np.random.default_rng(4)
        D = self.df.distance
        dims = np.array(self.grid.dims)
        if np.any(dims < 2):
            pytest.skip("needs at least two cells per axis")
        for _ in range(200):
            u = rng.uniform(0, dims - 1)
            i0 = np.minimum(np.floor(u).astype(int), dims - 2)
            w = u - i0
            expect = 0.0
            for corner in np.ndindex(2, 2, 2):
                weight = np.prod([w[a] if corner[a] else 1 - w[a] for a in range(3)])
                expect += weight * D[tuple(i0 + np.array(corner))]
            p = self.grid.origin + (u + 0.5) * self.grid.resolution
            assert distance_query(self.df, p)[0] == pytest.approx(expect, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        lo = self.grid.origin + self.grid.resolution
        hi = self.grid.upper - self.grid.resolution
        for _ in range(50):
            p = rng.uniform(lo, hi)
            _, g, _ = distance_query(self.df, p)
            h = 1e-7
            fd = [(distance_query(self.df, p + h * e)[0] - distance_query(self.df, p - h * e)[0]) / (2 * h)
                  for e in np.eye(3)]
            assert np.allclose(g, fd, atol=1e-5)

    def test_continuity(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            p = rng.uniform(self.grid.origin, self.grid.upper)
            delta = rng.normal(size=3)
            delta *= 1e-6 * rng.uniform() / np.linalg.norm(delta)
            a = distance_query(self.df, p)[0]
            b = distance_query(self.df, p + delta)[0]
            assert abs(a - b) <= np.sqrt(3) * 1e-6 + 1e-9

    def test_out_of_bounds_is_clamped_and_flagged(self):
        inside = self.grid.cell_center((0, 0, 0))
        d_in = distance_query(self.df, inside)[0]
        d_out, _, clamped = distance_query(self.df, inside - 10.0)
        assert clamped and d_out == pytest.approx(d_in)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(self.grid.origin, self.grid.upper, (20, 3))
        d, g, _ = distance_query(self.df, pts)
        for k in range(20):
            ds, gs, _ = distance_query(self.df, pts[k])
            assert d[k] == ds and np.array_equal(g[k], gs)


class TestDynamicObstacles:
    def test_constant_velocity(self):
        e = DynamicEllipsoid((0.3, 0.3, 0.3), ConstantVelocity((1.0, 0.0, 0.0)))
        p, v = obstacle_position_at(e, 2.0)
        assert np.allclose(p, (2, 0, 0)) and np.allclose(v, (1, 0, 0))

    def test_back_and_forth_reverses(self):
        e = DynamicEllipsoid((0.3, 0.3, 0.3), BackAndForth((0, 0, 0), (4, 0, 0), 1.0))
        p, v = obstacle_position_at(e, 6.0)
        assert np.allclose(p, (2, 0, 0)) and np.allclose(v, (-1, 0, 0))

    def test_back_and_forth_periodic(self):
        m = BackAndForth((0, 1, 0), (3, 5, 1), 0.7, 0.4)
        e = DynamicEllipsoid((0.3, 0.4, 0.5), m)
        for t in np.linspace(0, 20, 37):
            a, _ = obstacle_position_at(e, t)
            b, _ = obstacle_position_at(e, t + m.period)
            assert np.allclose(a, b, atol=1e-12)

    def test_pendulum_quarter_period(self):
        m = Pendulum((0, 0, 3), 1.5, 0.2)
        e = DynamicEllipsoid((0.3, 0.3, 0.3), m)
        quarter = 0.5 * np.pi / m.omega
        p, _ = obstacle_position_at(e, quarter)
        assert p[0] == pytest.approx(0.2, abs=1e-12)

    def test_axis_order_enforced(self):
        with pytest.raises(ValueError):
            DynamicEllipsoid((0.5, 0.3, 0.3), ConstantVelocity((0, 0, 0)))

    def test_negative_time_rejected(self):
        e = DynamicEllipsoid((0.3, 0.3, 0.3), ConstantVelocity((0, 0, 0)))
        with pytest.raises(ValueError):
            obstacle_position_at(e, -1.0)
