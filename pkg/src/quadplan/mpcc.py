"""Model predictive contouring control with discrete-time barrier constraints.

The solver is a condensed Gauss-Newton SQP. Decision variables are, per stage,
``(zeta, omega_x, omega_y, omega_z, dv_theta)``; states are eliminated by
forward simulation. Barrier inequalities and the thrust / progress-rate state
bounds enter through an augmented Lagrangian, the input boxes are kept exactly
by projection, and every subproblem is a box-constrained QP solved by a
projected Newton method.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .bspline import RefTrajectory
from .cbf import CbfConfig, barrier_values, chain_weights, cbf_constraint_set
from .dynamics import QuadParams, rollout_aug
from .world import DistanceField

NU = 5  # per-stage decision size


@dataclass(frozen=True)
class MpccConfig:
    N: int = 10
    dt: float = 0.1
    q_l: float = 100.0
    q_c: float = 100.0
    Q_u: tuple = (1e-3, 1.0, 1.0, 1.0)
    r_dv: float = 1e-2
    R_du: tuple = (1e-2, 1e-2, 1e-2, 1e-2)
    mu: float = 1.0
    v_theta_max: float = 3.0
    dv_bounds: tuple = (-6.0, 6.0)
    constraint_mode: str = "cbf"  # "cbf", "distance" or "none"
    cbf_on_disturbed_rollout: bool = True
    cbf_first_stage: int = 1        # first k carrying an h^3 row; 0 also constrains h^3(x_0, u_0)
    max_iters: int = 30
    tol: float = 1e-6
    feas_tol: float = 1e-4
    penalty_init: float = 1e3
    penalty_max: float = 1e8
    inner_iters: int = 6

    def __post_init__(self):
        if self.N < 2 or not self.dt > 0 or not self.v_theta_max > 0:
            raise ValueError("need N >= 2, dt > 0 and v_theta_max > 0")
        weights = (self.q_l, self.q_c, self.r_dv, self.mu, *self.Q_u, *self.R_du)
        if min(weights) < 0:
            raise ValueError("weights must be non-negative")
        if self.constraint_mode not in ("cbf", "distance", "none"):
            raise ValueError(f"unknown constraint mode {self.constraint_mode!r}")


@dataclass
class ProgressState:
    theta: float
    v_theta: float


@dataclass
class MpccProblem:
    x0: np.ndarray              # augmented state [p, v, q, T]
    prog: ProgressState
    ref: RefTrajectory
    forecasts: list
    df: DistanceField | None
    sigma0: np.ndarray
    cfg: MpccConfig
    cbf_cfg: CbfConfig
    params: QuadParams
    u_prev: np.ndarray           # u_{-1}
    terminal: bool
    lo: np.ndarray               # decision box, shape (N, 5)
    hi: np.ndarray


@dataclass
class MpccSolution:
    z: np.ndarray                # (N, 5)
    states: np.ndarray           # (N + 3, 11), the last two under zero input
    theta: np.ndarray            # (N + 1,)
    v_theta: np.ndarray          # (N + 1,)
    objective: float
    min_cbf_residual: float
    max_violation: float
    kkt: float
    iterations: int
    solve_time: float
    degraded: bool
    terminal: bool = False
    u_prev: np.ndarray = field(default_factory=lambda: np.zeros(4))
    merit_trace: list = field(default_factory=list)

    @property
    def inputs(self) -> np.ndarray:
        return self.z[:, :4]

    @property
    def dv(self) -> np.ndarray:
        return self.z[:, 4]

    @property
    def first_input(self) -> np.ndarray:
        return self.z[0].copy()


def lag_contour_errors(p, theta, ref: RefTrajectory):
    """``e = p - p^d(theta)`` split along the (unnormalized) reference tangent."""
    pd, tg = ref.evaluate(np.atleast_1d(theta), 1)
    e = np.asarray(p, float) - pd[0]
    t = tg[0]
    e_l = (t @ e) * t
    return e_l, e - e_l


def build_problem(x_hat, T_current, prog: ProgressState, ref: RefTrajectory, obstacles, df,
                  sigma_0, cfg: MpccConfig, cbf_cfg: CbfConfig, params: QuadParams,
                  u_prev=None) -> MpccProblem:
    """Snapshot one receding-horizon problem.

    ``x_hat`` is a :class:`QuadState`-like object with ``p, v, q``; ``obstacles``
    is a list of ``ObstacleForecast``.
    """
    x0 = np.concatenate([x_hat.p, x_hat.v, x_hat.q, [T_current]])
    terminal = prog.theta >= ref.length - 1e-6
    theta = min(max(prog.theta, 0.0), ref.length)
    v_theta = 0.0 if terminal else min(max(prog.v_theta, 0.0), cfg.v_theta_max)
    lo = np.tile(np.r_[params.aug_input_lower, cfg.dv_bounds[0]], (cfg.N, 1))
    hi = np.tile(np.r_[params.aug_input_upper, cfg.dv_bounds[1]], (cfg.N, 1))
    if terminal:
        lo[:, 4] = hi[:, 4] = 0.0
    up = np.zeros(4) if u_prev is None else np.asarray(u_prev, float)
    return MpccProblem(x0, ProgressState(theta, v_theta), ref, list(obstacles), df,
                       np.zeros(3) if sigma_0 is None else np.asarray(sigma_0, float),
                       cfg, cbf_cfg, params, up, terminal, lo, hi)


# -- rollout -------------------------------------------------------------------


def rollout(pb: MpccProblem, z, sensitivities: bool = False, sigma_on: bool = True):
    """States ``x_0..x_{N+2}``; with sensitivities also ``dx_k / d(inputs)`` of shape (N+3, 11, 4N)."""
    N = pb.cfg.N
    z = np.asarray(z, float).reshape(N, NU)
    U = np.zeros((N + 2, 4))
    U[:N] = z[:, :4]
    sig = pb.sigma0 if sigma_on else np.zeros(3)
    X, S = rollout_aug(pb.x0, U, sig, pb.cfg.dt, pb.params, N, sensitivities)
    return X, (S if sensitivities else None)


def progress_maps(pb: MpccProblem):
    """Affine maps ``theta = th0 + Gt dv`` and ``v = v0 + Gv dv`` for stages 0..N."""
    N, dt = pb.cfg.N, pb.cfg.dt
    Gt = np.zeros((N + 1, N))
    Gv = np.zeros((N + 1, N))
    for k in range(1, N + 1):
        for j in range(k):
            Gv[k, j] = dt
            Gt[k, j] = (k - 1 - j) * dt * dt + 0.5 * dt * dt
    th0 = pb.prog.theta + np.arange(N + 1) * dt * pb.prog.v_theta
    v0 = np.full(N + 1, pb.prog.v_theta)
    return th0, Gt, v0, Gv


def _input_quadratic(pb: MpccProblem):
    """Hessian ``H`` and linear term ``c`` such that the input cost is ``0.5 z'Hz + c'z + const``."""
    cfg, N = pb.cfg, pb.cfg.N
    n = N * NU
    H = np.zeros((n, n))
    c = np.zeros(n)
    Qu = np.asarray(cfg.Q_u, float)
    R = np.asarray(cfg.R_du, float)
    for k in range(N):
        b = k * NU
        H[b : b + 4, b : b + 4] += 2 * np.diag(Qu)
        H[b + 4, b + 4] += 2 * cfg.r_dv
        # (u_k - u_{k-1})' R (u_k - u_{k-1})
        H[b : b + 4, b : b + 4] += 2 * np.diag(R)
        if k == 0:
            c[0:4] += -2 * R * pb.u_prev
        else:
            a = (k - 1) * NU
            H[a : a + 4, a : a + 4] += 2 * np.diag(R)
            H[a : a + 4, b : b + 4] -= 2 * np.diag(R)
            H[b : b + 4, a : a + 4] -= 2 * np.diag(R)
    const = float(pb.u_prev @ (R * pb.u_prev))
    if not pb.terminal and cfg.mu:
        # -mu * sum_{k<N} v_theta_k
        _, _, v0, Gv = progress_maps(pb)
        for k in range(N):
            c[4::NU] += -cfg.mu * Gv[k]
        const += -cfg.mu * float(np.sum(v0[:N]))
    return H, c, const


@dataclass
class _Eval:
    X: np.ndarray
    theta: np.ndarray
    vtheta: np.ndarray
    J: float
    grad: np.ndarray
    H: np.ndarray
    g: np.ndarray
    Jg: np.ndarray
    n_cbf: int


class _Model:
    """Objective, Gauss-Newton model and constraints of one problem."""

    def __init__(self, pb: MpccProblem):
        self.pb = pb
        self.Hu, self.cu, self.const_u = _input_quadratic(pb)
        self.th0, self.Gt, self.v0, self.Gv = progress_maps(pb)
        if pb.terminal:
            self.Gt[:] = 0.0
            self.Gv[:] = 0.0
            self.v0[:] = 0.0
            self.th0[:] = pb.ref.length
        self.w3 = chain_weights(pb.cbf_cfg.c)

    def _expand(self, dX, n):
        """Map (.., 4N) input sensitivities into full (.., 5N) decision columns."""
        out = np.zeros(dX.shape[:-1] + (n,))
        for k in range(self.pb.cfg.N):
            out[..., k * NU : k * NU + 4] = dX[..., 4 * k : 4 * k + 4]
        return out

    def evaluate(self, z, need_derivs: bool = True) -> _Eval:
        pb, cfg = self.pb, self.pb.cfg
        N = cfg.N
        n = N * NU
        zf = np.asarray(z, float).ravel()
        X, S = rollout(pb, zf, sensitivities=need_derivs)
        dv = zf[4::NU]
        theta = self.th0 + self.Gt @ dv
        vth = self.v0 + self.Gv @ dv
        # tracking residuals for stages 0..N
        L = pb.ref.length
        th_c = np.clip(theta, 0.0, L)
        inside = (theta > 0.0) & (theta < L)
        pd, tg, kap = pb.ref.evaluate(th_c, 2)
        P = X[: N + 1, 0:3]
        e = P - pd
        s = np.sum(tg * e, axis=1)
        e_l = s[:, None] * tg
        e_c = e - e_l
        J = cfg.q_l * np.sum(e_l**2) + cfg.q_c * np.sum(e_c**2)
        J += 0.5 * zf @ self.Hu @ zf + self.cu @ zf + self.const_u
        if need_derivs:
            Sp = self._expand(S[:, 0:3, :], n)  # (N+3, 3, n)
            Gt_full = np.zeros((N + 1, n))
            Gt_full[:, 4::NU] = self.Gt * inside[:, None]
            # residual Jacobians (stage k rows)
            TT = tg[:, :, None] * tg[:, None, :]
            dl_dp = TT
            ds_dth = np.sum(kap * e, axis=1) - np.sum(tg * tg, axis=1)
            dl_dth = ds_dth[:, None] * tg + s[:, None] * kap
            dc_dth = -tg - dl_dth
            Jl = np.einsum("kij,kjn->kin", dl_dp, Sp[: N + 1]) + dl_dth[:, :, None] * Gt_full[:, None, :]
            Jc = Sp[: N + 1] - np.einsum("kij,kjn->kin", TT, Sp[: N + 1]) + dc_dth[:, :, None] * Gt_full[:, None, :]
            Jl2 = Jl.reshape(-1, n)
            Jc2 = Jc.reshape(-1, n)
            grad = 2 * cfg.q_l * Jl2.T @ e_l.ravel() + 2 * cfg.q_c * Jc2.T @ e_c.ravel()
            grad += self.Hu @ zf + self.cu
            H = 2 * cfg.q_l * Jl2.T @ Jl2 + 2 * cfg.q_c * Jc2.T @ Jc2 + self.Hu
        else:
            Sp = None
            grad = H = None
        g, Jg, n_cbf = self._constraints(zf, X, Sp, vth, need_derivs)
        return _Eval(X, theta, vth, float(J), grad, H, g, Jg, n_cbf)

    def _constraints(self, zf, X, Sp, vth, need_derivs):
        pb, cfg = self.pb, self.pb.cfg
        N = cfg.N
        n = N * NU
        rows, jac = [], []
        if cfg.constraint_mode != "none":
            if cfg.cbf_on_disturbed_rollout or not np.any(pb.sigma0):
                Xc, Spc = X, Sp
            else:
                Xc, Sc = rollout(pb, zf, sensitivities=need_derivs, sigma_on=False)
                Spc = self._expand(Sc[:, 0:3, :], n) if need_derivs else None
            Hb, Gb = barrier_values(Xc[:, 0:3], pb.df, pb.forecasts, pb.cbf_cfg)
            for b in range(len(Hb)):
                Gp = np.einsum("ki,kin->kn", Gb[b], Spc) if need_derivs else None
                if cfg.constraint_mode == "cbf":
                    k0 = cfg.cbf_first_stage
                    rows.extend(sum(self.w3[j] * Hb[b, k0 + j : N + j] for j in range(4)))
                    if need_derivs:
                        jac.extend(sum(self.w3[j] * Gp[k0 + j : N + j] for j in range(4)))
                else:
                    rows.extend(Hb[b, 1 : N + 1])
                    if need_derivs:
                        jac.extend(Gp[1 : N + 1])
        n_cbf = len(rows)
        # thrust and progress-rate bounds for stages 1..N
        T = X[1 : N + 1, 10]
        rows.extend(T - pb.params.thrust_min)
        rows.extend(pb.params.thrust_max - T)
        if need_derivs:
            ST = self._expand(_thrust_sens(N, cfg.dt), n)
            jac.extend(ST)
            jac.extend(-ST)
        if not pb.terminal:
            rows.extend(vth[1:])
            rows.extend(cfg.v_theta_max - vth[1:])
            if need_derivs:
                Gv_full = np.zeros((N, n))
                Gv_full[:, 4::NU] = self.Gv[1:]
                jac.extend(Gv_full)
                jac.extend(-Gv_full)
        g = np.array(rows)
        Jg = np.array(jac).reshape(len(rows), n) if need_derivs else None
        return g, Jg, n_cbf


def _thrust_sens(N, dt):
    """``dT_k / d(inputs)`` for k = 1..N in the (4N) input layout."""
    out = np.zeros((N, 4 * N))
    for k in range(1, N + 1):
        for j in range(k):
            out[k - 1, 4 * j] = dt
    return out


def objective_and_gradient(pb: MpccProblem, z):
    """Unconstrained objective and its exact gradient (used for verification)."""
    ev = _Model(pb).evaluate(z)
    return ev.J, ev.grad


def project(pb: MpccProblem, z) -> np.ndarray:
    """Sequential clipping onto the input boxes and the thrust / progress-rate bounds."""
    cfg, prm = pb.cfg, pb.params
    z = np.clip(np.asarray(z, float).reshape(cfg.N, NU), pb.lo, pb.hi)
    T = pb.x0[10]
    v = pb.prog.v_theta
    for k in range(cfg.N):
        zl = max(pb.lo[k, 0], (prm.thrust_min - T) / cfg.dt)
        zh = min(pb.hi[k, 0], (prm.thrust_max - T) / cfg.dt)
        z[k, 0] = min(max(z[k, 0], zl), max(zl, zh))
        T = T + z[k, 0] * cfg.dt
        if not pb.terminal:
            dl = max(pb.lo[k, 4], (0.0 - v) / cfg.dt)
            dh = min(pb.hi[k, 4], (cfg.v_theta_max - v) / cfg.dt)
            z[k, 4] = min(max(z[k, 4], dl), max(dl, dh))
            v = v + z[k, 4] * cfg.dt
    return z


def box_qp(H, g, lo, hi, max_iter: int = 30):
    """Minimize ``0.5 d'Hd + g'd`` over ``lo <= d <= hi`` by projected Newton with active sets."""
    d = np.clip(np.zeros_like(g), lo, hi)

    def q(x):
        return 0.5 * x @ H @ x + g @ x

    for _ in range(max_iter):
        grad = H @ d + g
        act = ((d <= lo) & (grad > 0)) | ((d >= hi) & (grad < 0))
        free = ~act
        if not free.any():
            break
        x = d.copy()
        rhs = -(g[free] + H[np.ix_(free, act)] @ d[act])
        try:
            x[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
        except np.linalg.LinAlgError:
            x[free] = np.linalg.lstsq(H[np.ix_(free, free)], rhs, rcond=None)[0]
        # projected search along the Newton direction
        step, qd = 1.0, q(d)
        while step > 1e-10:
            cand = np.clip(d + step * (x - d), lo, hi)
            if q(cand) <= qd + 1e-12 * abs(qd):
                break
            step *= 0.5
        if np.max(np.abs(cand - d)) < 1e-12:
            d = cand
            break
        d = cand
    return d


class MpccSolver:
    def __init__(self):
        self.stats = []

    def solve(self, pb: MpccProblem, warm_start: MpccSolution | None = None) -> MpccSolution:
        return solve(pb, warm_start)


def _al_terms(g, lam, rho):
    """Augmented-Lagrangian value, the active shifted multipliers and the active mask."""
    shifted = lam - rho * g
    act = shifted > 0
    val = float(np.sum(np.where(act, shifted**2, 0.0) - lam**2) / (2 * rho))
    return val, np.where(act, shifted, 0.0), act


def solve(pb: MpccProblem, warm_start: MpccSolution | None = None) -> MpccSolution:
    """Anytime SQP; always returns the best bound-feasible iterate seen."""
    t_start = time.perf_counter()
    cfg = pb.cfg
    N = cfg.N
    n = N * NU
    model = _Model(pb)
    if warm_start is None:
        z0 = np.zeros((N, NU))
    else:
        z0 = np.asarray(warm_start.z, float).reshape(N, NU)
    lo, hi = pb.lo.ravel(), pb.hi.ravel()
    # iterates keep the input boxes exactly; thrust and progress-rate bounds are
    # handled by the augmented Lagrangian and enforced exactly on the way out
    z = np.clip(z0.ravel(), lo, hi)
    ev = model.evaluate(z)
    m = len(ev.g)
    lam = np.zeros(m)
    rho = cfg.penalty_init

    def violation(e):
        return float(np.max(np.maximum(0.0, -e.g))) if len(e.g) else 0.0

    def merit(e):
        return e.J + _al_terms(e.g, lam, rho)[0]

    def rank(e):
        # thrust / progress-rate rows are repaired by the final projection, so
        # only barrier violations count when picking the iterate to return
        v = float(np.max(np.maximum(0.0, -e.g[: e.n_cbf]))) if e.n_cbf else 0.0
        return (v > cfg.feas_tol, v if v > cfg.feas_tol else 0.0, e.J)

    best = z.copy()
    best_key = rank(ev)
    merit_trace = [[merit(ev)]]
    kkt = np.inf
    iters = 0
    inner = 0
    prev_viol = violation(ev)
    while iters < cfg.max_iters:
        _, mult, act = _al_terms(ev.g, lam, rho)
        gL = ev.grad - (ev.Jg.T @ mult if m else 0.0)
        # projected gradient on the box as the stationarity measure
        pg = np.clip(z - gL, lo, hi) - z
        kkt = float(np.max(np.abs(pg))) if n else 0.0
        viol = violation(ev)
        if kkt < cfg.tol and viol <= cfg.feas_tol:
            break
        H = ev.H.copy()
        # curvature also for constraints sitting on or just above their bound
        near = act | (ev.g < 1e-3) if m else act
        if m and near.any():
            Ja = ev.Jg[near]
            H += rho * Ja.T @ Ja
        H += 1e-9 * np.eye(n)
        d = box_qp(H, gL, lo - z, hi - z)
        phi0 = merit(ev)
        slope = gL @ d
        step = 1.0
        accepted = False
        while step > 1e-8:
            zt = z + step * d
            et = model.evaluate(zt, need_derivs=False)
            if merit(et) <= phi0 + 1e-4 * step * slope:
                accepted = True
                et = model.evaluate(zt)
                break
            step *= 0.5
        iters += 1
        inner += 1
        moved = 0.0
        if accepted:
            moved = float(np.max(np.abs(zt - z)))
            z, ev = zt, et
            merit_trace[-1].append(merit(ev))
            key = rank(ev)
            if key < best_key:
                best, best_key = z.copy(), key
        # close the multiplier stage once the inner problem has settled
        if not accepted or moved < 1e-7 or inner >= cfg.inner_iters:
            viol = violation(ev)
            lam = np.maximum(0.0, lam - rho * ev.g)
            if viol > cfg.feas_tol and viol > 0.25 * prev_viol:
                rho = min(rho * 10.0, cfg.penalty_max)
            prev_viol = viol
            inner = 0
            merit_trace.append([merit(ev)])
    zb = project(pb, best).ravel()
    eb = model.evaluate(zb, need_derivs=False)
    X, _ = rollout(pb, zb)
    ncb = eb.n_cbf
    min_cbf = float(np.min(eb.g[:ncb])) if ncb else np.inf
    viol = float(np.max(np.maximum(0.0, -eb.g[:ncb]))) if ncb else 0.0
    return MpccSolution(
        z=zb.reshape(N, NU).copy(),
        states=X,
        theta=np.clip(eb.theta, 0.0, pb.ref.length),
        v_theta=eb.vtheta.copy(),
        objective=eb.J,
        min_cbf_residual=min_cbf,
        max_violation=viol,
        kkt=kkt,
        iterations=iters,
        solve_time=time.perf_counter() - t_start,
        degraded=bool(viol > cfg.feas_tol),
        terminal=pb.terminal,
        u_prev=pb.u_prev.copy(),
        merit_trace=merit_trace,
    )


def receding_step(prev: MpccSolution) -> MpccSolution:
    """Shift by one stage, repeating the last stage; ``u_{-1}`` becomes the old first input."""
    z = np.vstack([prev.z[1:], prev.z[-1:]])
    states = np.vstack([prev.states[1:], prev.states[-1:]])
    theta = np.append(prev.theta[1:], prev.theta[-1])
    v_theta = np.append(prev.v_theta[1:], prev.v_theta[-1])
    return replace(prev, z=z, states=states, theta=theta, v_theta=v_theta,
                   u_prev=prev.z[0, :4].copy(), merit_trace=[])
