"""Kinodynamic A* over a point-mass model with piecewise-constant acceleration."""

from __future__ import annotations

import heapq
import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .world import OccupancyGrid

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
T_MAX = 50.0
VEL_BIN = 0.5


class NoPathError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    tau: float = 0.5
    n_a: int = 2
    accel_bounds: tuple = ((-3.0, 3.0), (-3.0, 3.0), (-3.0, 3.0))
    vel_bounds: tuple = ((-3.0, 3.0), (-3.0, 3.0), (-3.0, 3.0))
    rho: float = 10.0
    goal_tolerance: float = 0.5
    sweep_samples: int = 10
    max_expansions: int = 200_000
    heuristic_weight: float = 1.0  # 0 turns the search into uniform-cost search
    time_in_heuristic: bool = False  # add rho * T* to h (faster, not the default estimate)

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if int(self.n_a) < 1:
            raise ValueError("n_a must be >= 1")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        for lo, hi in (*self.accel_bounds, *self.vel_bounds):
            if not lo < hi:
                raise ValueError("bounds must satisfy lower < upper")

    def accel_levels(self, axis: int) -> np.ndarray:
        lo, hi = self.accel_bounds[axis]
        n = int(self.n_a)
        neg = [lo * j / n for j in range(n, 0, -1)]
        pos = [hi * j / n for j in range(1, n + 1)]
        return np.array(neg + [0.0] + pos)

    def primitives(self) -> np.ndarray:
        """All ``(2 n_a + 1)^3`` acceleration vectors."""
        levels = [self.accel_levels(a) for a in range(3)]
        return np.array(list(itertools.product(*levels)), dtype=float)


@dataclass
class NodeState:
    p: np.ndarray
    v: np.ndarray
    g_cost: float = 0.0
    parent: NodeState | None = None
    accel: np.ndarray | None = None

    def __post_init__(self):
        self.p = np.asarray(self.p, float)
        self.v = np.asarray(self.v, float)


@dataclass
class SearchTrajectory:
    """Start state plus a list of constant-acceleration segments ``(tau, a)``."""

    start_p: np.ndarray
    start_v: np.ndarray
    segments: list = field(default_factory=list)
    cost: float = 0.0

    def __post_init__(self):
        self.start_p = np.asarray(self.start_p, float)
        self.start_v = np.asarray(self.start_v, float)
        self.segments = [(float(t), np.asarray(a, float)) for t, a in self.segments]

    @property
    def duration(self) -> float:
        return float(sum(t for t, _ in self.segments))

    def knots(self):
        """Node states ``(p_i, v_i)`` at every segment boundary, propagated exactly."""
        ps, vs = [self.start_p.copy()], [self.start_v.copy()]
        for tau, a in self.segments:
            p, v = ps[-1], vs[-1]
            ps.append(p + v * tau + 0.5 * a * tau * tau)
            vs.append(v + a * tau)
        return ps, vs

    def state(self, t: float):
        """Position and velocity at time ``t`` (clamped to ``[0, duration]``)."""
        t = min(max(float(t), 0.0), self.duration)
        p, v = self.start_p.copy(), self.start_v.copy()
        for tau, a in self.segments:
            if t <= tau:
                return p + v * t + 0.5 * a * t * t, v + a * t
            p, v = p + v * tau + 0.5 * a * tau * tau, v + a * tau
            t -= tau
        return p, v

    def position(self, t: float) -> np.ndarray:
        return self.state(t)[0]

    def sample(self, n: int) -> np.ndarray:
        ts = np.linspace(0.0, self.duration, n)
        return np.array([self.position(t) for t in ts])

    def recompute_cost(self, rho: float) -> float:
        return float(sum((a @ a + rho) * tau for tau, a in self.segments))

    def to_json(self) -> dict:
        return {
            "start_p": self.start_p.tolist(),
            "start_v": self.start_v.tolist(),
            "segments": [{"tau": t, "a": a.tolist()} for t, a in self.segments],
            "cost": self.cost,
        }

    @classmethod
    def from_json(cls, data: dict) -> SearchTrajectory:
        segs = [(s["tau"], s["a"]) for s in data["segments"]]
        return cls(data["start_p"], data["start_v"], segs, float(data.get("cost", 0.0)))

    def dumps(self) -> str:
        return json.dumps(self.to_json())


# -- heuristic ---------------------------------------------------------------


def optimal_coefficients(dp, dv, T):
    """Per-axis ``(alpha, beta)`` of the minimum-effort jerk-free profile ``a(t) = alpha t + beta``.

    ``dp`` is ``p_goal - p_cur - v_cur T`` and ``dv`` is ``v_goal - v_cur``.
    """
    T = np.asarray(T, float)
    alpha = (-12.0 * dp + 6.0 * T * dv) / T**3
    beta = (6.0 * T * dp - 2.0 * T**2 * dv) / T**3
    return alpha, beta


def j_star(p_c, v_c, p_g, v_g, T) -> np.ndarray:
    """Closed-form control effort ``J*(T)``; broadcasts over leading dims of ``T``."""
    T = np.asarray(T, float)
    Te = T[..., None]
    dp = np.asarray(p_g) - np.asarray(p_c) - np.asarray(v_c) * Te
    dv = np.asarray(v_g) - np.asarray(v_c)
    alpha, beta = optimal_coefficients(dp, dv, Te)
    return np.sum(alpha**2 * Te**3 / 3.0 + alpha * beta * Te**2 + beta**2 * Te, axis=-1)


def _poly_coeffs(p_c, v_c, p_g, v_g):
    """Rows ``(c1, c2, c3)`` with ``J*(T) = c1/T + c2/T^2 + c3/T^3``, summed over axes.

    With ``P = p_g - p_c`` and ``dv = v_g - v_c`` the coefficients are
    ``alpha = (a + bT)/T^3`` and ``beta = (c + dT)/T^2``, so ``T^3 J*`` is the
    quadratic ``(a + bT)^2/3 + (a + bT)(c + dT) + (c + dT)^2``.
    """
    P = np.asarray(p_g, float) - np.asarray(p_c, float)
    vc = np.asarray(v_c, float)
    dv = np.asarray(v_g, float) - vc
    a, b = -12.0 * P, 6.0 * dv + 12.0 * vc
    c, d = 6.0 * P, -(6.0 * vc + 2.0 * dv)
    c1 = b * b / 3.0 + b * d + d * d          # T^2 coefficient
    c2 = 2.0 * a * b / 3.0 + a * d + b * c + 2.0 * c * d
    c3 = a * a / 3.0 + a * c + c * c
    return np.stack([c1.sum(-1), c2.sum(-1), c3.sum(-1)], axis=-1)


@njit(cache=True)
def _minimize_rows(c, rho, grid):
    n = c.shape[0]
    out = np.empty(n)
    for r in range(n):
        c1, c2, c3 = c[r, 0], c[r, 1], c[r, 2]
        best, k = np.inf, 0
        for j in range(grid.shape[0]):
            T = grid[j]
            val = c1 / T + c2 / T**2 + c3 / T**3 + rho * T
            if val < best:
                best, k = val, j
        a = 1e-9 if k == 0 else grid[k - 1]
        b = grid[min(k + 1, grid.shape[0] - 1)]
        x1 = b - GOLDEN * (b - a)
        x2 = a + GOLDEN * (b - a)
        f1 = c1 / x1 + c2 / x1**2 + c3 / x1**3 + rho * x1
        f2 = c1 / x2 + c2 / x2**2 + c3 / x2**3 + rho * x2
        while b - a > 1e-6:
            if f1 < f2:
                b, x2, f2 = x2, x1, f1
                x1 = b - GOLDEN * (b - a)
                f1 = c1 / x1 + c2 / x1**2 + c3 / x1**3 + rho * x1
            else:
                a, x1, f1 = x1, x2, f2
                x2 = a + GOLDEN * (b - a)
                f2 = c1 / x2 + c2 / x2**2 + c3 / x2**3 + rho * x2
        out[r] = 0.5 * (a + b)
    return out


_T_GRID = np.geomspace(1e-3, T_MAX, 400)


def _minimize_total(c, rho):
    """``argmin_{T in (0, T_MAX]} c1/T + c2/T^2 + c3/T^3 + rho T`` per row.

    A log-spaced scan brackets the minimum, golden-section search refines it.
    """
    c = np.ascontiguousarray(np.atleast_2d(c), dtype=float)
    return _minimize_rows(c, float(rho), _T_GRID)


def heuristic_batch(p_c, v_c, p_g, v_g, rho):
    """``(T*, h)`` for a batch of current states against one goal."""
    p_c = np.atleast_2d(p_c)
    v_c = np.atleast_2d(v_c)
    c = _poly_coeffs(p_c, v_c, np.asarray(p_g, float), np.asarray(v_g, float))
    same = np.all(p_c == p_g, axis=1) & np.all(v_c == v_g, axis=1)
    T = _minimize_total(c, rho)
    h = c[:, 0] / T + c[:, 1] / T**2 + c[:, 2] / T**3
    T = np.where(same, 0.0, T)
    h = np.where(same, 0.0, np.maximum(h, 0.0))
    return T, h


def heuristic_cost(current: NodeState, goal: NodeState, rho: float):
    """Optimal-time estimate ``T*`` and cost-to-go ``h = J*(T*)``."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    T, h = heuristic_batch(current.p, current.v, goal.p, goal.v, rho)
    return float(T[0]), float(h[0])


# -- search --------------------------------------------------------------------


def _successors(p, v, cfg: SearchConfig, grid: OccupancyGrid, prims: np.ndarray):
    tau = cfg.tau
    vn = v + prims * tau
    lo = np.array([b[0] for b in cfg.vel_bounds])
    hi = np.array([b[1] for b in cfg.vel_bounds])
    keep = np.all((vn >= lo) & (vn <= hi), axis=1)
    pn = p + v * tau + 0.5 * prims * tau * tau
    keep &= np.any(grid.cell_of(pn) != grid.cell_of(p), axis=1)
    # sweep check at tau / sweep_samples, endpoint included
    s = np.arange(1, cfg.sweep_samples + 1) * (tau / cfg.sweep_samples)
    pts = p + v * s[:, None, None] + 0.5 * prims[None, :, :] * (s**2)[:, None, None]
    free = grid.is_free(pts.reshape(-1, 3)).reshape(len(s), len(prims))
    keep &= np.all(free, axis=0)
    return pn[keep], vn[keep], prims[keep]


def expand_node(s: NodeState, cfg: SearchConfig, grid: OccupancyGrid) -> list:
    pn, vn, an = _successors(s.p, s.v, cfg, grid, cfg.primitives())
    cost = [(a @ a + cfg.rho) * cfg.tau for a in an]
    return [NodeState(p, v, s.g_cost + c, s, a) for p, v, a, c in zip(pn, vn, an, cost)]


def _key(grid: OccupancyGrid, p, v):
    return tuple(int(i) for i in grid.cell_of(p)) + tuple(int(b) for b in np.floor(v / VEL_BIN))


def search(start: NodeState, goal: NodeState, grid: OccupancyGrid, cfg: SearchConfig) -> SearchTrajectory:
    """A* over motion primitives; the first node popped within tolerance of the goal ends it.

    Raises ValueError for occupied endpoints and NoPathError when the open set
    runs dry (or the expansion budget is spent).
    """
    if not grid.is_free(start.p) or not grid.is_free(goal.p):
        raise ValueError("start and goal must lie in free cells")
    prims = cfg.primitives()
    root = NodeState(start.p, start.v, 0.0)
    best = {_key(grid, root.p, root.v): 0.0}
    T0, h0 = heuristic_cost(root, goal, cfg.rho)
    if cfg.time_in_heuristic:
        h0 += cfg.rho * T0
    h0 *= cfg.heuristic_weight
    tick = itertools.count()
    open_heap = [(h0, h0, tuple(grid.cell_of(root.p)), next(tick), root)]
    expansions = 0
    while open_heap:
        _, _, _, _, node = heapq.heappop(open_heap)
        key = _key(grid, node.p, node.v)
        if node.g_cost > best.get(key, np.inf):
            continue  # stale entry
        if np.linalg.norm(node.p - goal.p) <= cfg.goal_tolerance:
            return _trace(node, start, cfg)
        expansions += 1
        if expansions > cfg.max_expansions:
            break
        pn, vn, an = _successors(node.p, node.v, cfg, grid, prims)
        if not len(pn):
            continue
        g = node.g_cost + (np.sum(an * an, axis=1) + cfg.rho) * cfg.tau
        Ts, h = heuristic_batch(pn, vn, goal.p, goal.v, cfg.rho)
        if cfg.time_in_heuristic:
            h = h + cfg.rho * Ts
        h = h * cfg.heuristic_weight
        keys = np.hstack([grid.cell_of(pn), np.floor(vn / VEL_BIN)]).astype(np.int64).tolist()
        for i in range(len(pn)):
            k = tuple(keys[i])
            if g[i] < best.get(k, np.inf):
                best[k] = g[i]
                child = NodeState(pn[i], vn[i], float(g[i]), node, an[i])
                heapq.heappush(open_heap, (g[i] + h[i], h[i], k[:3], next(tick), child))
    raise NoPathError("open set exhausted without reaching the goal")


def _trace(node: NodeState, start: NodeState, cfg: SearchConfig) -> SearchTrajectory:
    g_final = node.g_cost
    accels = []
    while node.parent is not None:
        accels.append(node.accel)
        node = node.parent
    accels.reverse()
    return SearchTrajectory(start.p, start.v, [(cfg.tau, a) for a in accels], cost=g_final)
