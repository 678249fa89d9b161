"""Cubic uniform B-spline refinement and the arc-length reference built from it."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .kinodynamic import SearchTrajectory
from .world import DistanceField, distance_query

M = np.array(
    [
        [1.0, 4.0, 1.0, 0.0],
        [-3.0, 0.0, 3.0, 0.0],
        [3.0, -6.0, 3.0, 0.0],
        [-1.0, 3.0, -3.0, 1.0],
    ]
) / 6.0


@dataclass
class BSplineTrajectory:
    """Control points ``P_0..P_Nb`` with uniform knots ``t_k = t_start + (k - 3) dt``."""

    control_points: np.ndarray
    dt: float
    t_start: float = 0.0

    def __post_init__(self):
        self.control_points = np.array(self.control_points, float).reshape(-1, 3)
        if len(self.control_points) < 6:
            raise ValueError("need at least 6 control points")
        if not self.dt > 0:
            raise ValueError("knot spacing must be positive")

    @property
    def n_b(self) -> int:
        return len(self.control_points) - 1

    @property
    def t_end(self) -> float:
        return self.t_start + (self.n_b - 2) * self.dt

    def knot(self, k: int) -> float:
        return self.t_start + (k - 3) * self.dt


def _basis_rows(alpha, order):
    a = np.asarray(alpha, float)
    one, zero = np.ones_like(a), np.zeros_like(a)
    if order == 0:
        rows = [one, a, a * a, a**3]
    elif order == 1:
        rows = [zero, one, 2 * a, 3 * a * a]
    elif order == 2:
        rows = [zero, zero, 2 * one, 6 * a]
    else:
        rows = [zero, zero, zero, 6 * one]
    return np.stack(rows, axis=-1) @ M


def eval_spline(b: BSplineTrajectory, t, order: int = 2):
    """Position and time derivatives up to ``order`` at ``t`` (scalar or array).

    Returns ``(derivs, clamped)`` where ``derivs[j]`` is the j-th derivative with
    shape ``(3,)`` or ``(n, 3)``; ``t`` outside the domain is clamped and flagged.
    """
    t = np.asarray(t, float)
    scalar = t.ndim == 0
    ts = np.atleast_1d(t)
    clamped = (ts < b.t_start) | (ts > b.t_end)
    tc = np.clip(ts, b.t_start, b.t_end)
    u = (tc - b.t_start) / b.dt
    span = np.minimum(np.floor(u).astype(int), b.n_b - 3)  # k - 3
    alpha = u - span
    idx = span[:, None] + np.arange(4)[None, :]
    P = b.control_points[idx]  # (n, 4, 3)
    out = []
    for j in range(order + 1):
        w = _basis_rows(alpha, j) / b.dt**j  # (n, 4)
        out.append(np.einsum("nk,nkd->nd", w, P))
    if scalar:
        return [o[0] for o in out], bool(clamped[0])
    return out, clamped


def position(b: BSplineTrajectory, t):
    return eval_spline(b, t, order=0)[0][0]


# -- costs ---------------------------------------------------------------------


def _smooth_abs_norm(x, eps):
    """``||x||`` (eps = 0) or ``sqrt(||x||^2 + eps^2) - eps`` row-wise, plus its gradient."""
    n = np.sqrt(np.sum(x * x, axis=-1) + eps * eps)
    safe = np.where(n > 0, n, 1.0)
    grad = np.where((n > 0)[:, None], x / safe[:, None], 0.0)
    return n - eps, grad


def smoothness_cost(points, eps: float = 0.0):
    """Sum of second-difference norms over ``i = 3..Nb`` and its gradient."""
    P = np.asarray(points, float)
    if len(P) < 4:
        raise ValueError("need at least 4 points")
    nb = len(P) - 1
    i = np.arange(3, nb + 1)
    D = P[i - 3] - 2 * P[i - 2] + P[i - 1]
    val, g = _smooth_abs_norm(D, eps)
    grad = np.zeros_like(P)
    np.add.at(grad, i - 3, g)
    np.add.at(grad, i - 2, -2 * g)
    np.add.at(grad, i - 1, g)
    return float(val.sum()), grad


def uniformity_cost(points, eps: float = 0.0):
    """Sum over ``i = 3..Nb-1`` of ``| ||P_{i-1} - P_{i-3}|| - ||P_i - P_{i-2}|| |`` and its gradient.

    With ``eps > 0`` the outer absolute value becomes ``sqrt(x^2 + eps^2) - eps``.
    """
    P = np.asarray(points, float)
    if len(P) < 5:
        raise ValueError("need at least 5 points")
    nb = len(P) - 1
    i = np.arange(3, nb)
    A = P[i - 1] - P[i - 3]
    B = P[i] - P[i - 2]
    na, ga = _smooth_abs_norm(A, 0.0)
    nbn, gb = _smooth_abs_norm(B, 0.0)
    x = na - nbn
    if eps > 0:
        r = np.sqrt(x * x + eps * eps)
        val, s = r - eps, x / r
    else:
        val, s = np.abs(x), np.sign(x)
    grad = np.zeros_like(P)
    np.add.at(grad, i - 1, s[:, None] * ga)
    np.add.at(grad, i - 3, -s[:, None] * ga)
    np.add.at(grad, i, -s[:, None] * gb)
    np.add.at(grad, i - 2, s[:, None] * gb)
    return float(val.sum()), grad


def clearance_cost(points, df: DistanceField, d_thr: float):
    """``sum max(0, d_thr - d(P_i))^2`` over ``i = 3..Nb-3`` and its gradient."""
    P = np.asarray(points, float)
    nb = len(P) - 1
    i = np.arange(3, nb - 2)
    grad = np.zeros_like(P)
    if len(i) == 0:
        return 0.0, grad
    d, g, _ = distance_query(df, P[i])
    viol = np.maximum(0.0, d_thr - d)
    grad[i] = (-2.0 * viol)[:, None] * g
    return float(np.sum(viol * viol)), grad


# -- fitting ---------------------------------------------------------------------


def _collocation(n: int, dt: float, times: np.ndarray) -> np.ndarray:
    """Matrix mapping control points to spline positions at ``times`` (t_start = 0)."""
    A = np.zeros((len(times), n))
    u = np.clip(times / dt, 0.0, n - 3)
    span = np.minimum(np.floor(u).astype(int), n - 4)
    w = _basis_rows(u - span, 0)
    for r in range(len(times)):
        A[r, span[r] : span[r] + 4] = w[r]
    return A


FIT_OVERSAMPLE = 4


def fit_control_points(traj: SearchTrajectory, n_points: int) -> BSplineTrajectory:
    """Least-squares fit of ``n_points`` control points with exact endpoint interpolation.

    Samples sit on a uniform grid ``FIT_OVERSAMPLE`` times finer than the knots.
    Exactly ``n_points`` samples would make the system square and nearly
    singular: the error then grows geometrically toward the far end.
    """
    if n_points < 6:
        raise ValueError("n_points must be >= 6")
    D = traj.duration
    p0 = traj.position(0.0)
    if D <= 0.0:
        return BSplineTrajectory(np.tile(p0, (n_points, 1)), 1.0, 0.0)
    dt = D / (n_points - 3)
    times = np.linspace(0.0, D, FIT_OVERSAMPLE * (n_points - 3) + 1)
    samples = np.array([traj.position(t) for t in times])
    A = _collocation(n_points, dt, times)
    C = A[[0, -1]]
    kkt = np.zeros((n_points + 2, n_points + 2))
    kkt[:n_points, :n_points] = A.T @ A
    kkt[:n_points, n_points:] = C.T
    kkt[n_points:, :n_points] = C
    rhs = np.vstack([A.T @ samples, samples[[0, -1]]])
    sol = np.linalg.solve(kkt, rhs)
    return BSplineTrajectory(sol[:n_points], dt, 0.0)


# -- optimization -----------------------------------------------------------------


@dataclass(frozen=True)
class SplineOptConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3_slack: float = 100.0
    d_thr: float = 0.8
    max_iters: int = 1000
    gradient_tolerance: float = 1e-6
    smoothing_eps: float = 1e-6
    memory: int = 8

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3_slack) < 0:
            raise ValueError("weights must be non-negative")
        if not self.d_thr > 0:
            raise ValueError("d_thr must be positive")


@dataclass
class OptResult:
    spline: BSplineTrajectory
    objective_trace: list
    iterations: int
    converged: bool


class _Reduced:
    """Parametrization over ``P_2..P_{Nb-2}``.

    The endpoint identities together with zero second differences at both ends
    give ``P_1 = p_s``, ``P_0 = 2 p_s - P_2`` and the mirror image at the goal.
    ``P_Nb`` enters no cost term, so this also pins the otherwise free last point.
    """

    def __init__(self, n, p_s, p_g):
        self.n = n
        self.p_s = np.asarray(p_s, float)
        self.p_g = np.asarray(p_g, float)
        self.free = np.arange(2, n - 2)

    def expand(self, z):
        n = self.n
        P = np.zeros((n, 3))
        P[2 : n - 2] = z.reshape(-1, 3)
        P[1] = self.p_s
        P[0] = 2 * self.p_s - P[2]
        P[n - 2] = self.p_g
        P[n - 1] = 2 * self.p_g - P[n - 3]
        return P

    def reduce_grad(self, G):
        G = G.copy()
        n = self.n
        G[2] -= G[0]
        G[n - 3] -= G[n - 1]
        return G[self.free].ravel()


def penalized_objective(P, df, cfg: SplineOptConfig, eps: float):
    s, gs = smoothness_cost(P, eps)
    u, gu = uniformity_cost(P, eps)
    if df is None:
        c, gc = 0.0, np.zeros_like(P)
    else:
        c, gc = clearance_cost(P, df, cfg.d_thr)
    f = cfg.lambda1 * s + cfg.lambda2 * u + cfg.lambda3_slack * c
    return f, cfg.lambda1 * gs + cfg.lambda2 * gu + cfg.lambda3_slack * gc


def optimize_spline(init: BSplineTrajectory, df: DistanceField | None, cfg: SplineOptConfig,
                    p_s, p_g, return_info: bool = False):
    """Limited-memory quasi-Newton descent with Armijo backtracking on the penalized cost.

    The endpoint conditions hold exactly because the two outermost control
    points at each end are expressed through them instead of being optimized.
    """
    n = len(init.control_points)
    red = _Reduced(n, p_s, p_g)
    z = init.control_points[red.free].ravel().copy()

    def fg(zv):
        P = red.expand(zv)
        f, G = penalized_objective(P, df, cfg, cfg.smoothing_eps)
        return f, red.reduce_grad(G)

    f, g = fg(z)
    if not np.isfinite(f):
        raise ValueError("objective is not finite at the initial guess")
    trace = [f]
    S, Y = [], []
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        if np.linalg.norm(g, np.inf) < cfg.gradient_tolerance:
            converged = True
            it -= 1
            break
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s_, y_ in reversed(list(zip(S, Y))):
            a = (s_ @ q) / (y_ @ s_)
            alphas.append(a)
            q -= a * y_
        if S:
            q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        for (s_, y_), a in zip(zip(S, Y), reversed(alphas)):
            bcoef = (y_ @ q) / (y_ @ s_)
            q += s_ * (a - bcoef)
        d = -q
        if d @ g >= 0:
            d = -g
            S.clear()
            Y.clear()
        step = 1.0
        accepted = False
        while step > 1e-12:
            zn = z + step * d
            fn, gn = fg(zn)
            if np.isfinite(fn) and fn <= f + 1e-4 * step * (g @ d):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        s_, y_ = zn - z, gn - g
        if s_ @ y_ > 1e-12 * np.linalg.norm(s_) * np.linalg.norm(y_):
            S.append(s_)
            Y.append(y_)
            if len(S) > cfg.memory:
                S.pop(0)
                Y.pop(0)
        z, f, g = zn, fn, gn
        trace.append(f)
    out = BSplineTrajectory(red.expand(z), init.dt, init.t_start)
    if return_info:
        return OptResult(out, trace, it, converged)
    return out


# -- arc-length reference ----------------------------------------------------------


@dataclass
class RefTrajectory:
    """Reference ``p^d(theta)`` through the linear time map ``t = t_3 + theta / L * (t_end - t_3)``."""

    spline: BSplineTrajectory
    length: float
    uniformity_residual: float

    @property
    def scale(self) -> float:
        """``dt / dtheta``."""
        return (self.spline.t_end - self.spline.t_start) / self.length

    def time_of(self, theta):
        th = np.clip(np.asarray(theta, float), 0.0, self.length)
        return self.spline.t_start + th * self.scale

    def evaluate(self, theta, order: int = 1):
        """``[p^d, dp^d/dtheta, ...]`` up to ``order`` (array in, arrays out)."""
        derivs, _ = eval_spline(self.spline, self.time_of(theta), order)
        c = self.scale
        return [d * c**j for j, d in enumerate(derivs)]

    def position(self, theta):
        return self.evaluate(theta, 0)[0]

    def tangent(self, theta):
        return self.evaluate(theta, 1)[1]

    @property
    def end_point(self) -> np.ndarray:
        return self.position(self.length)

    def export_csv(self, path, dtheta: float = 0.1) -> None:
        thetas = np.append(np.arange(0.0, self.length, dtheta), self.length)
        p, tg = self.evaluate(thetas, 1)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["theta", "x", "y", "z", "tx", "ty", "tz"])
            for th, pp, tt in zip(thetas, p, tg):
                w.writerow([f"{th:.6f}", *(f"{x:.6f}" for x in pp), *(f"{x:.6f}" for x in tt)])


def arc_length(b: BSplineTrajectory, t: float | None = None) -> float:
    """Arc length from ``t_3`` to ``t`` by adaptive quadrature, span by span."""
    t = b.t_end if t is None else min(max(t, b.t_start), b.t_end)

    def speed(tt):
        return float(np.linalg.norm(eval_spline(b, tt, 1)[0][1]))

    total = 0.0
    k = 0
    while b.knot(3 + k) < t - 1e-15 and k < b.n_b - 2:
        lo, hi = b.knot(3 + k), min(b.knot(4 + k), t)
        # the speed is smooth inside a span, so quad converges quickly
        val, _ = quad(speed, lo, hi, epsabs=0.0, epsrel=1e-12, limit=200)
        total += val
        k += 1
    return total


def to_reference(s_star: BSplineTrajectory, n_check: int = 2000) -> RefTrajectory:
    L = arc_length(s_star)
    if not L > 0:
        raise ValueError("spline has zero length")
    ref = RefTrajectory(s_star, L, 0.0)
    tg = ref.tangent(np.linspace(0.0, L, n_check))
    ref.uniformity_residual = float(np.max(np.abs(np.linalg.norm(tg, axis=1) - 1.0)))
    return ref
