"""Generalized proportional-integral observer for the lumped acceleration disturbance."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import QuadParams, body_z


@dataclass
class GpioGains:
    G1: np.ndarray
    G2: np.ndarray
    G3: np.ndarray

    def __post_init__(self):
        for name in ("G1", "G2", "G3"):
            diag = np.asarray(getattr(self, name), float).reshape(3)
            if np.any(diag <= 0):
                raise ValueError(f"{name} must have positive diagonal entries")
            setattr(self, name, diag)

    def error_matrix(self, axis: int = 0) -> np.ndarray:
        """Continuous error dynamics of ``(v - v_hat, z1 - z1_hat, z2 - z2_hat)`` on one axis."""
        return np.array(
            [
                [-self.G1[axis], 1.0, 0.0],
                [-self.G2[axis], 0.0, 1.0],
                [-self.G3[axis], 0.0, 0.0],
            ]
        )


def gains_from_pole(p) -> GpioGains:
    """Triple pole at ``-p`` on every axis: the coefficients of ``(s + p)^3``."""
    p = np.broadcast_to(np.asarray(p, float), (3,)).copy()
    if np.any(p <= 0):
        raise ValueError("observer pole must be positive")
    return GpioGains(3.0 * p, 3.0 * p**2, p**3)


@dataclass
class GpioState:
    v_hat: np.ndarray = field(default_factory=lambda: np.zeros(3))
    z1_hat: np.ndarray = field(default_factory=lambda: np.zeros(3))
    z2_hat: np.ndarray = field(default_factory=lambda: np.zeros(3))


def update(s: GpioState, v_meas, q, T, params: QuadParams, gains: GpioGains, dt: float) -> GpioState:
    """One explicit Euler step of the observer.

    ``q`` and ``T`` are the attitude and collective thrust that drove the vehicle
    over the step; ``v_meas`` is the measured velocity.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    err = np.asarray(v_meas, float) - s.v_hat
    model_acc = body_z(q) * (T / params.m) + params.g
    return GpioState(
        v_hat=s.v_hat + dt * (model_acc + s.z1_hat + gains.G1 * err),
        z1_hat=s.z1_hat + dt * (s.z2_hat + gains.G2 * err),
        z2_hat=s.z2_hat + dt * (gains.G3 * err),
    )


def disturbance_for_mpcc(s: GpioState) -> np.ndarray:
    """Disturbance used in the first prediction step; later steps use zero."""
    return s.z1_hat.copy()
