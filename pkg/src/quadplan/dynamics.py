"""Quadrotor rigid-body model, its Euler prediction model and the thrust-augmented system.

State layout used by the vectorized helpers: ``[p(3), v(3), q(4)]`` for the raw
state and ``[p(3), v(3), q(4), T]`` for the augmented state. Quaternions are
Hamilton ``(w, x, y, z)`` and rotate body vectors into the world frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

E3 = np.array([0.0, 0.0, 1.0])


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_rot(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def body_z(q) -> np.ndarray:
    """Third column of R(q): the body z-axis in world coordinates."""
    w, x, y, z = q
    return np.array([2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)])


def quat_from_axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def tilt_angle(q) -> float:
    """Angle (rad) between body z and world z."""
    return float(np.arccos(np.clip(body_z(q)[2], -1.0, 1.0)))


@dataclass
class QuadParams:
    m: float = 1.0
    g: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    thrust_min: float = 1.0
    thrust_max: float = 25.0
    rate_max: tuple = (4.0, 4.0, 1.5)
    zeta_max: float = 60.0

    def __post_init__(self):
        if not self.m > 0:
            raise ValueError("mass must be positive")
        self.g = np.asarray(self.g, float)

    @property
    def hover_thrust(self) -> float:
        return -self.m * float(self.g[2])

    @property
    def aug_input_lower(self) -> np.ndarray:
        return np.array([-self.zeta_max, *(-np.asarray(self.rate_max, float))])

    @property
    def aug_input_upper(self) -> np.ndarray:
        return np.array([self.zeta_max, *np.asarray(self.rate_max, float)])


@dataclass
class QuadState:
    p: np.ndarray
    v: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, float)
        self.v = np.asarray(self.v, float)
        self.q = np.asarray(self.q, float)

    @classmethod
    def at_rest(cls, p) -> QuadState:
        return cls(np.asarray(p, float), np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.v, self.q])

    @classmethod
    def from_vector(cls, x) -> QuadState:
        x = np.asarray(x, float)
        return cls(x[0:3].copy(), x[3:6].copy(), x[6:10].copy())


@dataclass
class ControlInput:
    T: float
    omega: np.ndarray

    def __post_init__(self):
        self.T = float(self.T)
        self.omega = np.asarray(self.omega, float)


@dataclass
class AugmentedState:
    x: QuadState
    T: float

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.x.as_vector(), [self.T]])

    @classmethod
    def from_vector(cls, xa) -> AugmentedState:
        xa = np.asarray(xa, float)
        return cls(QuadState.from_vector(xa[:10]), float(xa[10]))


@dataclass
class AugmentedInput:
    zeta: float
    omega: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.zeta], np.asarray(self.omega, float)])


def continuous_dynamics(x: QuadState, u: ControlInput, sigma, params: QuadParams):
    """Time derivative ``(p_dot, v_dot, q_dot)`` of the rigid-body model."""
    sigma = np.zeros(3) if sigma is None else np.asarray(sigma, float)
    p_dot = x.v.copy()
    v_dot = body_z(x.q) * (u.T / params.m) + params.g + sigma
    q_dot = 0.5 * quat_mul(x.q, np.concatenate([[0.0], u.omega]))
    return p_dot, v_dot, q_dot


def step_euler(x: QuadState, u: ControlInput, sigma, dt: float, params: QuadParams) -> QuadState:
    """One explicit Euler step followed by quaternion renormalization."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    p_dot, v_dot, q_dot = continuous_dynamics(x, u, sigma, params)
    q = x.q + dt * q_dot
    return QuadState(x.p + dt * p_dot, x.v + dt * v_dot, q / np.linalg.norm(q))


def step_aug(xa: AugmentedState, ua: AugmentedInput, sigma, dt: float, params: QuadParams) -> AugmentedState:
    """Augmented step: the body moves under the current thrust, then thrust integrates zeta."""
    nxt = step_euler(xa.x, ControlInput(xa.T, ua.omega), sigma, dt, params)
    return AugmentedState(nxt, xa.T + ua.zeta * dt)


def _dbodyz_dq(q) -> np.ndarray:
    w, x, y, z = q
    return 2.0 * np.array([[y, z, w, x], [-x, -w, z, y], [0.0, -2 * x, -2 * y, 0.0]])


def _right_mult_pure(omega) -> np.ndarray:
    """Matrix of ``q -> q (x) (0, omega)``."""
    ox, oy, oz = omega
    return np.array([[0.0, -ox, -oy, -oz], [ox, 0.0, oz, -oy], [oy, -oz, 0.0, ox], [oz, oy, -ox, 0.0]])


def _left_mult_vec(q) -> np.ndarray:
    """Matrix of ``omega -> q (x) (0, omega)``."""
    w, x, y, z = q
    return np.array([[-x, -y, -z], [w, -z, y], [z, w, -x], [-y, x, w]])


def aug_step_vec(xa, ua, sigma, dt: float, params: QuadParams, jacobian: bool = False):
    """Vector form of :func:`step_aug` on ``[p, v, q, T]`` and ``[zeta, omega]``.

    With ``jacobian=True`` also returns ``A = d x+/d x`` (11x11) and ``B = d x+/d u`` (11x4).
    Arithmetic mirrors :func:`step_euler` so the two agree to rounding.
    """
    xa = np.asarray(xa, float)
    ua = np.asarray(ua, float)
    p, v, q, T = xa[0:3], xa[3:6], xa[6:10], xa[10]
    omega = ua[1:4]
    sig = np.zeros(3) if sigma is None else np.asarray(sigma, float)
    bz = body_z(q)
    q_dot = 0.5 * quat_mul(q, np.concatenate([[0.0], omega]))
    qt = q + dt * q_dot
    nq = np.linalg.norm(qt)
    out = np.empty(11)
    out[0:3] = p + dt * v
    out[3:6] = v + dt * (bz * (T / params.m) + params.g + sig)
    out[6:10] = qt / nq
    out[10] = T + ua[0] * dt
    if not jacobian:
        return out
    qn = out[6:10]
    Pn = (np.eye(4) - np.outer(qn, qn)) / nq
    A = np.eye(11)
    A[0:3, 3:6] = dt * np.eye(3)
    A[3:6, 6:10] = (dt * T / params.m) * _dbodyz_dq(q)
    A[3:6, 10] = dt * bz / params.m
    A[6:10, 6:10] = Pn @ (np.eye(4) + 0.5 * dt * _right_mult_pure(omega))
    B = np.zeros((11, 4))
    B[6:10, 1:4] = Pn @ (0.5 * dt * _left_mult_vec(q))
    B[10, 0] = dt
    return out, A, B


def _deriv_vec(x, T, omega, sigma, params):
    q = x[6:10]
    out = np.empty(10)
    out[0:3] = x[3:6]
    out[3:6] = body_z(q) * (T / params.m) + params.g + sigma
    out[6:10] = 0.5 * quat_mul(q, np.concatenate([[0.0], omega]))
    return out


def simulate_plant(x: QuadState, u: ControlInput, sigma_fn, dt_ctrl: float, n_substeps: int,
                   params: QuadParams, t0: float = 0.0) -> QuadState:
    """Integrate the rigid-body model over one control period with classic RK4.

    ``sigma_fn(t)`` returns the true disturbance acceleration at time ``t``; pass
    None for an undisturbed plant. The input is held constant over the period.
    """
    if n_substeps < 1:
        raise ValueError("n_substeps must be >= 1")
    zero = np.zeros(3)
    sig = (lambda t: zero) if sigma_fn is None else sigma_fn
    h = dt_ctrl / n_substeps
    s = x.as_vector()
    omega = np.asarray(u.omega, float)
    for i in range(n_substeps):
        t = t0 + i * h
        k1 = _deriv_vec(s, u.T, omega, np.asarray(sig(t), float), params)
        k2 = _deriv_vec(s + 0.5 * h * k1, u.T, omega, np.asarray(sig(t + 0.5 * h), float), params)
        k3 = _deriv_vec(s + 0.5 * h * k2, u.T, omega, np.asarray(sig(t + 0.5 * h), float), params)
        k4 = _deriv_vec(s + h * k3, u.T, omega, np.asarray(sig(t + h), float), params)
        s = s + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    s[6:10] /= np.linalg.norm(s[6:10])
    return QuadState.from_vector(s)


@numba.njit(cache=True)
def _rollout_kernel(x0, U, sigma0, dt, m, g, n_sens, want_sens):
    K = U.shape[0]
    X = np.empty((K + 1, 11))
    X[0] = x0
    S = np.zeros((K + 1, 11, 4 * n_sens)) if want_sens else np.zeros((1, 11, 4 * n_sens))
    A = np.zeros((11, 11))
    B = np.zeros((11, 4))
    for k in range(K):
        p = X[k, 0:3]
        v = X[k, 3:6]
        w, x, y, z = X[k, 6], X[k, 7], X[k, 8], X[k, 9]
        T = X[k, 10]
        ox, oy, oz = U[k, 1], U[k, 2], U[k, 3]
        bz0 = 2 * (x * z + w * y)
        bz1 = 2 * (y * z - w * x)
        bz2 = 1 - 2 * (x * x + y * y)
        qd0 = 0.5 * (-x * ox - y * oy - z * oz)
        qd1 = 0.5 * (w * ox + y * oz - z * oy)
        qd2 = 0.5 * (w * oy - x * oz + z * ox)
        qd3 = 0.5 * (w * oz + x * oy - y * ox)
        qt0 = w + dt * qd0
        qt1 = x + dt * qd1
        qt2 = y + dt * qd2
        qt3 = z + dt * qd3
        nq = np.sqrt(qt0 * qt0 + qt1 * qt1 + qt2 * qt2 + qt3 * qt3)
        s0 = sigma0[0] if k == 0 else 0.0
        s1 = sigma0[1] if k == 0 else 0.0
        s2 = sigma0[2] if k == 0 else 0.0
        for i in range(3):
            X[k + 1, i] = p[i] + dt * v[i]
        X[k + 1, 3] = v[0] + dt * (bz0 * (T / m) + g[0] + s0)
        X[k + 1, 4] = v[1] + dt * (bz1 * (T / m) + g[1] + s1)
        X[k + 1, 5] = v[2] + dt * (bz2 * (T / m) + g[2] + s2)
        X[k + 1, 6] = qt0 / nq
        X[k + 1, 7] = qt1 / nq
        X[k + 1, 8] = qt2 / nq
        X[k + 1, 9] = qt3 / nq
        X[k + 1, 10] = T + U[k, 0] * dt
        if not want_sens:
            continue
        A[:, :] = 0.0
        B[:, :] = 0.0
        for i in range(11):
            A[i, i] = 1.0
        for i in range(3):
            A[i, 3 + i] = dt
        c = dt * T / m
        dq = np.array([[y, z, w, x], [-x, -w, z, y], [0.0, -2 * x, -2 * y, 0.0]]) * 2.0
        for i in range(3):
            for j in range(4):
                A[3 + i, 6 + j] = c * dq[i, j]
        A[3, 10] = dt * bz0 / m
        A[4, 10] = dt * bz1 / m
        A[5, 10] = dt * bz2 / m
        qn = X[k + 1, 6:10]
        Pn = (np.eye(4) - np.outer(qn, qn)) / nq
        Om = np.array([[0.0, -ox, -oy, -oz], [ox, 0.0, oz, -oy], [oy, -oz, 0.0, ox], [oz, oy, -ox, 0.0]])
        A[6:10, 6:10] = Pn @ (np.eye(4) + 0.5 * dt * Om)
        Lq = np.array([[-x, -y, -z], [w, -z, y], [z, w, -x], [-y, x, w]])
        B[6:10, 1:4] = Pn @ (0.5 * dt * Lq)
        B[10, 0] = dt
        S[k + 1] = A @ S[k]
        if k < n_sens:
            S[k + 1, :, 4 * k : 4 * k + 4] += B
    return X, S


def rollout_aug(x0, U, sigma0, dt: float, params: QuadParams, n_sens: int, sensitivities: bool = True):
    """Augmented rollout under inputs ``U`` (rows ``[zeta, omega]``) with ``sigma0`` on the first step only.

    Returns the states and, when requested, ``dX/dU`` restricted to the first
    ``n_sens`` inputs, laid out as ``(K + 1, 11, 4 n_sens)``.
    """
    return _rollout_kernel(np.asarray(x0, float), np.ascontiguousarray(U, dtype=float),
                           np.asarray(sigma0, float), float(dt), float(params.m),
                           np.asarray(params.g, float), int(n_sens), bool(sensitivities))
