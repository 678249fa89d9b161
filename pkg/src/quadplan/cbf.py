"""Collision barrier functions and the high-order discrete-time CBF constraint set."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .world import DistanceField, distance_query

DEGENERATE = 1e-9


@dataclass(frozen=True)
class CbfConfig:
    c: tuple = (0.3, 0.3, 0.3)
    r: float = 0.25
    d_risk: float = 0.3

    def __post_init__(self):
        if len(self.c) != 3 or not all(0.0 <= ci < 1.0 for ci in self.c):
            raise ValueError("recursion constants must lie in [0, 1)")
        if not self.r > 0 or self.d_risk < 0:
            raise ValueError("need r > 0 and d_risk >= 0")

    @property
    def margin(self) -> float:
        return self.r + self.d_risk


def ellipsoid_boundary_distance(m_o, axes) -> float:
    """Center-to-surface distance of the ellipsoid along direction ``m_o`` (ellipsoid frame).

    Uses the polar angle ``psi`` from the ellipsoid z-axis and the azimuth ``phi``
    of the xy-projection.
    """
    lx, ly, lz = axes
    m = np.asarray(m_o, float)
    n = float(np.linalg.norm(m))
    if n < DEGENERATE or lx == ly == lz:
        return float(lx)
    on_axis = np.flatnonzero(m)
    if len(on_axis) == 1:
        # closed form along a principal axis; the trig route would round
        return float(axes[on_axis[0]])
    psi = np.arccos(np.clip(m[2] / n, -1.0, 1.0))
    phi = np.arctan2(m[1], m[0])
    sp2 = np.sin(psi) ** 2
    inv = sp2 * np.cos(phi) ** 2 / lx**2 + sp2 * np.sin(phi) ** 2 / ly**2 + np.cos(psi) ** 2 / lz**2
    return float(inv ** -0.5)


def _boundary_distance_batch(m, axes):
    """Vectorized boundary distance and its gradient with respect to ``m``.

    Along a ray the angle form equals ``||m|| / ||m / l||``, which is what is
    differentiated here.
    """
    lam = 1.0 / np.asarray(axes, float)
    n = np.linalg.norm(m, axis=1)
    dm = m * lam
    nd = np.linalg.norm(dm, axis=1)
    deg = n < DEGENERATE
    n_s = np.where(deg, 1.0, n)
    nd_s = np.where(deg, 1.0, nd)
    l_o = np.where(deg, axes[0], n / nd_s)
    if axes[0] == axes[1] == axes[2]:
        l_o = np.full_like(n, axes[0])
    single = np.count_nonzero(m, axis=1) == 1
    if single.any():
        l_o[single] = np.asarray(axes, float)[np.argmax(m[single] != 0, axis=1)]
    grad = m / (n_s * nd_s)[:, None] - (n_s / nd_s**3)[:, None] * (dm * lam)
    grad[deg] = 0.0
    return l_o, grad


def h_static(p, df: DistanceField, cfg: CbfConfig, with_grad: bool = False):
    """``d(p) - r - d_risk``; batch input gives array output."""
    d, g, _ = distance_query(df, p)
    h = d - cfg.margin
    return (h, g) if with_grad else h


def h_dynamic(p, p_o, axes, R_o, cfg: CbfConfig, with_grad: bool = False):
    """``||p - p_o|| - l_o - r - d_risk`` with ``l_o`` along ``R_o^T (p - p_o)``.

    Single points use the angle formula directly; batches (``p`` of shape (n, 3)
    with matching ``p_o``) use the vectorized equivalent and can return gradients.
    """
    p = np.asarray(p, float)
    R_o = np.asarray(R_o, float)
    if p.ndim == 1 and not with_grad:
        rel = p - np.asarray(p_o, float)
        return float(np.linalg.norm(rel) - ellipsoid_boundary_distance(R_o.T @ rel, axes) - cfg.margin)
    pts = p.reshape(-1, 3)
    rel = pts - np.asarray(p_o, float).reshape(-1, 3)
    m = rel @ R_o
    l_o, gl = _boundary_distance_batch(m, axes)
    n = np.linalg.norm(rel, axis=1)
    h = n - l_o - cfg.margin
    if not with_grad:
        return h
    unit = np.where((n > DEGENERATE)[:, None], rel / np.where(n > DEGENERATE, n, 1.0)[:, None], 0.0)
    grad = unit - gl @ R_o.T
    if p.ndim == 1:
        return float(h[0]), grad[0]
    return h, grad


def hocbf_chain(h, c):
    """``[h^0, h^1, h^2, h^3]`` with ``h^i_k = h^{i-1}_{k+1} + (c_i - 1) h^{i-1}_k``.

    ``h`` may carry trailing dimensions (for example Jacobian rows); each level is
    one entry shorter along axis 0 than the previous.
    """
    h = np.asarray(h, float)
    if h.shape[0] < 4:
        raise ValueError("need at least 4 samples")
    out = [h]
    for ci in c:
        prev = out[-1]
        out.append(prev[1:] + (ci - 1.0) * prev[:-1])
    return out


def chain_weights(c) -> np.ndarray:
    """Weights ``w`` such that ``h^3_k = sum_j w_j h_{k+j}`` (expanded product of the recursion)."""
    a1, a2, a3 = (ci - 1.0 for ci in c)
    return np.array([a1 * a2 * a3, a1 * a2 + a1 * a3 + a2 * a3, a1 + a2 + a3, 1.0])


@dataclass
class ObstacleForecast:
    """Ellipsoid centers over the horizon (constant-velocity extrapolation)."""

    centers: np.ndarray  # (K, 3)
    axes: tuple
    rotation: np.ndarray

    @classmethod
    def extrapolate(cls, p_o, v_o, axes, rotation, dt, n):
        k = np.arange(n)[:, None]
        return cls(np.asarray(p_o, float) + k * dt * np.asarray(v_o, float), tuple(axes), np.asarray(rotation, float))


def barrier_values(positions, df: DistanceField | None, forecasts, cfg: CbfConfig):
    """Barrier sequences ``(n_barriers, K)`` and position gradients ``(n_barriers, K, 3)``.

    Row 0 is the static barrier when ``df`` is given; the rest follow ``forecasts``.
    """
    P = np.asarray(positions, float)
    rows, grads = [], []
    if df is not None and not df.empty:
        h, g = h_static(P, df, cfg, with_grad=True)
        rows.append(h)
        grads.append(g)
    for fc in forecasts:
        h, g = h_dynamic(P, fc.centers[: len(P)], fc.axes, fc.rotation, cfg, with_grad=True)
        rows.append(h)
        grads.append(g)
    if not rows:
        return np.zeros((0, len(P))), np.zeros((0, len(P), 3))
    return np.array(rows), np.array(grads)


@dataclass
class BarrierEvaluation:
    initial: np.ndarray    # (n_barriers, 3): h^0, h^1, h^2 at k = 0
    per_step: np.ndarray   # (n_barriers, N - 1): h^3 at k = 1..N-1
    h3_at_0: np.ndarray    # diagnostic only
    levels: list           # full chains per barrier

    @property
    def initially_feasible(self) -> bool:
        return bool(np.all(self.initial >= 0.0))

    @property
    def min_residual(self) -> float:
        return float(self.per_step.min()) if self.per_step.size else np.inf


def cbf_constraint_set(positions, df, forecasts, cfg: CbfConfig, horizon: int) -> BarrierEvaluation:
    """Residuals for a rollout of ``horizon + 3`` positions ``p_0..p_{N+2}``."""
    P = np.asarray(positions, float)
    if len(P) < horizon + 3:
        raise ValueError("rollout must contain positions up to index N + 2")
    H, _ = barrier_values(P[: horizon + 3], df, forecasts, cfg)
    initial, steps, diag, levels = [], [], [], []
    for h in H:
        lv = hocbf_chain(h, cfg.c)
        levels.append(lv)
        initial.append([lv[0][0], lv[1][0], lv[2][0]])
        steps.append(lv[3][1:horizon])
        diag.append(lv[3][0])
    n = len(H)
    return BarrierEvaluation(
        np.array(initial).reshape(n, 3),
        np.array(steps).reshape(n, max(horizon - 1, 0)),
        np.array(diag),
        levels,
    )

