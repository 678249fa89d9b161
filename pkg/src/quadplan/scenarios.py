"""Canonical scenarios used by the acceptance suite and the CLI examples."""

from __future__ import annotations

from dataclasses import replace

from .bspline import SplineOptConfig
from .harness import Disturbance, ScenarioSpec, SimConfig


def corridor(length: float = 20.0, seed: int = 0) -> ScenarioSpec:
    """Empty corridor with a straight flight from one end to the other."""
    return ScenarioSpec(
        name="corridor", size=(length + 2.0, 6.0, 3.0),
        start=(1.0, 3.0, 1.0), goal=(1.0 + length, 3.0, 1.0), seed=seed,
        sim=SimConfig(t_max=3.0 * length),
    )


def single_cylinder(seed: int = 0, constraint: str = "cbf") -> ScenarioSpec:
    """One cylinder slightly off the straight line between start and goal."""
    return ScenarioSpec(
        name="single_cylinder", size=(14.0, 6.0, 3.0),
        cylinders=[(7.0, 3.3, 0.5, 3.0)],
        start=(1.0, 3.0, 1.0), goal=(13.0, 3.0, 1.0),
        constraint=constraint, seed=seed, jitter_start=0.2, jitter_obstacles=0.2,
        spline=SplineOptConfig(d_thr=0.6),
        sim=SimConfig(t_max=20.0),
    )


def dynamic_crossing(seed: int = 0, constraint: str = "cbf") -> ScenarioSpec:
    """An ellipsoid sweeping back and forth across an otherwise empty corridor.

    The phase is chosen so the mover crosses y = 3 between 2 s and 3 s, which is
    when the vehicle reaches x = 7.
    """
    mover = {
        "axes": [0.3, 0.3, 0.6],
        "motion": {"type": "back_and_forth", "start": [7.0, 0.5, 1.0], "end": [7.0, 5.5, 1.0],
                   "speed": 1.0, "offset": -0.5},
    }
    return ScenarioSpec(
        name="dynamic_crossing", size=(14.0, 6.0, 3.0), dynamic_obstacles=[mover],
        start=(1.0, 3.0, 1.0), goal=(13.0, 3.0, 1.0),
        constraint=constraint, seed=seed, jitter_start=0.2, jitter_obstacles=1.0,
        sim=SimConfig(t_max=20.0),
    )


def disturbance(seed: int = 0, gpio: bool = True, force: float = 4.0) -> ScenarioSpec:
    """A 1 s push along [1 1 0] toward a cylinder standing beside the path."""
    f = force / 2.0**0.5
    return ScenarioSpec(
        name="disturbance", size=(14.0, 6.0, 3.0),
        cylinders=[(7.5, 4.3, 0.5, 3.0)],
        start=(1.0, 3.0, 1.0), goal=(13.0, 3.0, 1.0),
        disturbances=[Disturbance(1.5, 1.0, (f, f, 0.0))],
        gpio=gpio, seed=seed, jitter_start=0.1,
        sim=SimConfig(t_max=20.0),
    )


CANONICAL = {
    "corridor": corridor,
    "single_cylinder": single_cylinder,
    "dynamic_crossing": dynamic_crossing,
    "disturbance": disturbance,
}


def with_seed(spec: ScenarioSpec, seed: int) -> ScenarioSpec:
    return replace(spec, seed=seed)
