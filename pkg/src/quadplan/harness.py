"""Scenario description, closed-loop episodes, metrics and batch statistics."""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .bspline import SplineOptConfig, fit_control_points, optimize_spline, to_reference
from .cbf import CbfConfig, ObstacleForecast, _boundary_distance_batch
from .dynamics import ControlInput, QuadParams, QuadState, simulate_plant, tilt_angle
from .gpio import GpioState, disturbance_for_mpcc, gains_from_pole, update
from .kinodynamic import NodeState, NoPathError, SearchConfig, search
from .mpcc import MpccConfig, ProgressState, build_problem, lag_contour_errors, solve
from .world import (
    BackAndForth,
    ConstantVelocity,
    DynamicEllipsoid,
    OccupancyGrid,
    Pendulum,
    build_esdf,
    distance_query,
    obstacle_position_at,
    rasterize_cylinders,
)

SCHEMA_VERSION = 1
SENTINEL_CUTOFF = 1e300  # barrier values above this stem from the empty-map sentinel

LOG_COLUMNS = [
    "t", "px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz",
    "T", "zeta", "wx", "wy", "wz", "theta", "v_theta",
    "sigma_x", "sigma_y", "sigma_z", "sigma_hat_x", "sigma_hat_y", "sigma_hat_z", "sigma_hat_norm",
    "d_static", "h_s", "h_o_min", "risk", "e_l", "e_c", "tilt",
    "iterations", "degraded", "min_cbf_residual",
]


# -- configuration -------------------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.02
    substeps: int = 4
    t_max: float = 20.0
    goal_tolerance: float = 0.5
    drag: float = 0.0          # linear drag coefficient k_d, enters as -k_d v / m
    noise: float = 0.0         # std of velocity measurement noise
    gpio_pole: float = 15.0
    spline_spacing: float = 0.5


@dataclass
class Disturbance:
    start: float
    duration: float
    force: tuple

    def active(self, t: float) -> bool:
        return self.start <= t < self.start + self.duration


@dataclass
class ScenarioSpec:
    name: str = "scenario"
    resolution: float = 0.1
    origin: tuple = (0.0, 0.0, 0.0)
    size: tuple = (20.0, 6.0, 3.0)
    cylinders: list = field(default_factory=list)
    forest: dict | None = None
    dynamic_obstacles: list = field(default_factory=list)   # dict descriptions
    start: tuple = (1.0, 3.0, 1.0)
    goal: tuple = (19.0, 3.0, 1.0)
    disturbances: list = field(default_factory=list)
    constraint: str = "cbf"          # "cbf" or "dc"
    gpio: bool = True
    seed: int = 0
    jitter_start: float = 0.0
    jitter_obstacles: float = 0.0
    sim: SimConfig = field(default_factory=SimConfig)
    search: SearchConfig = field(default_factory=lambda: SearchConfig(heuristic_weight=1.5, time_in_heuristic=True))
    spline: SplineOptConfig = field(default_factory=SplineOptConfig)
    mpcc: MpccConfig = field(default_factory=MpccConfig)
    cbf: CbfConfig = field(default_factory=CbfConfig)
    quad: QuadParams = field(default_factory=QuadParams)

    # JSON round trip ------------------------------------------------------------
    def to_json(self) -> dict:
        def cfg(obj):
            out = {}
            for f in fields(obj):
                v = getattr(obj, f.name)
                out[f.name] = v.tolist() if isinstance(v, np.ndarray) else _plain(v)
            return out

        return {
            "schema": SCHEMA_VERSION,
            "name": self.name,
            "map": {"resolution": self.resolution, "origin": list(self.origin), "size": list(self.size)},
            "cylinders": [list(c) for c in self.cylinders],
            "forest": self.forest,
            "dynamic_obstacles": self.dynamic_obstacles,
            "start": list(self.start),
            "goal": list(self.goal),
            "disturbances": [asdict(d) for d in self.disturbances],
            "variant": {"constraint": self.constraint, "gpio": self.gpio},
            "seed": self.seed,
            "jitter": {"start": self.jitter_start, "obstacles": self.jitter_obstacles},
            "sim": cfg(self.sim),
            "search": cfg(self.search),
            "spline": cfg(self.spline),
            "mpcc": cfg(self.mpcc),
            "cbf": cfg(self.cbf),
            "quad": cfg(self.quad),
        }

    @classmethod
    def from_json(cls, data: dict, base_dir: Path | None = None) -> ScenarioSpec:
        if data.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported scenario schema {data.get('schema')!r}")
        m = data.get("map", {})
        cyl = [tuple(c) for c in data.get("cylinders", [])]
        if "grid" in m:
            raise ValueError("grid files are referenced through 'grid_path'")
        spec = cls(
            name=data.get("name", "scenario"),
            resolution=m.get("resolution", 0.1),
            origin=tuple(m.get("origin", (0.0, 0.0, 0.0))),
            size=tuple(m.get("size", (20.0, 6.0, 3.0))),
            cylinders=cyl,
            forest=data.get("forest"),
            dynamic_obstacles=data.get("dynamic_obstacles", []),
            start=tuple(data["start"]),
            goal=tuple(data["goal"]),
            disturbances=[Disturbance(d["start"], d["duration"], tuple(d["force"])) for d in data.get("disturbances", [])],
            constraint=data.get("variant", {}).get("constraint", "cbf"),
            gpio=bool(data.get("variant", {}).get("gpio", True)),
            seed=int(data.get("seed", 0)),
            jitter_start=data.get("jitter", {}).get("start", 0.0),
            jitter_obstacles=data.get("jitter", {}).get("obstacles", 0.0),
        )
        sections = {"sim": SimConfig, "search": SearchConfig, "spline": SplineOptConfig,
                    "mpcc": MpccConfig, "cbf": CbfConfig, "quad": QuadParams}
        for key, typ in sections.items():
            if key in data:
                kwargs = {k: _tupled(v) for k, v in data[key].items()}
                setattr(spec, key, typ(**kwargs))
        return spec

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> ScenarioSpec:
        path = Path(path)
        return cls.from_json(json.loads(path.read_text()), path.parent)

    def variant(self, constraint: str | None = None, gpio: bool | None = None, seed: int | None = None) -> ScenarioSpec:
        out = copy.deepcopy(self)
        if constraint is not None:
            out.constraint = constraint
        if gpio is not None:
            out.gpio = gpio
        if seed is not None:
            out.seed = seed
        return out

    @property
    def variant_label(self) -> str:
        return f"{self.constraint}-{'gpio' if self.gpio else 'nogpio'}"


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def _tupled(v):
    if isinstance(v, list):
        return tuple(_tupled(x) for x in v)
    return v


def make_ellipsoid(desc: dict) -> DynamicEllipsoid:
    mot = desc["motion"]
    kind = mot["type"]
    if kind == "constant_velocity":
        motion = ConstantVelocity(tuple(mot["velocity"]))
    elif kind == "back_and_forth":
        motion = BackAndForth(tuple(mot["start"]), tuple(mot["end"]), mot["speed"], mot.get("offset", 0.0))
    elif kind == "pendulum":
        motion = Pendulum(tuple(mot["pivot"]), mot["length"], mot["amplitude"], mot.get("phase", 0.0),
                          tuple(mot.get("axis", (1.0, 0.0, 0.0))))
    else:
        raise ValueError(f"unknown motion type {kind!r}")
    rot = np.asarray(desc.get("rotation", np.eye(3)), float)
    return DynamicEllipsoid(tuple(desc["axes"]), motion, tuple(desc.get("position", (0.0, 0.0, 0.0))), rot)


# -- metrics -----------------------------------------------------------------------------


def risk_index(d, r: float, d_risk: float):
    """Proximity score in [0, 1]: 1 inside ``r``, linear to 0 at ``r + d_risk``.

    With ``d_risk = 0`` it is a step at ``r``.
    """
    d = np.asarray(d, float)
    if d_risk == 0:
        out = np.where(d < r, 1.0, 0.0)
    else:
        out = np.maximum(1.0 - (np.clip(d, r, r + d_risk) - r) / d_risk, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass
class RunMetrics:
    avg_velocity: float
    peak_velocity: float
    risk_index: float
    success: bool
    min_h_s: float
    collided: bool
    reached_goal: bool
    reason: str = ""
    degraded_steps: int = 0
    steps: int = 0

    def row(self) -> dict:
        return asdict(self)


def aggregate_metrics(log: list, goal, goal_tolerance: float, r: float, reason: str = "") -> RunMetrics:
    """Reduce a per-step log (dicts keyed by :data:`LOG_COLUMNS`) to episode metrics.

    ``d_static`` and ``d_dynamic`` in the rows hold distances to the nearest
    static cell center and to the nearest ellipsoid surface respectively.
    """
    if not log:
        raise ValueError("empty log")
    v = np.array([[row["vx"], row["vy"], row["vz"]] for row in log])
    speed = np.linalg.norm(v, axis=1)
    risk = np.array([row["risk"] for row in log])
    p_last = np.array([log[-1]["px"], log[-1]["py"], log[-1]["pz"]])
    reached = bool(np.linalg.norm(p_last - np.asarray(goal, float)) <= goal_tolerance)
    d_s = np.array([row["d_static"] for row in log])
    d_o = np.array([row.get("d_dynamic", np.inf) for row in log])
    collided = bool(np.any(d_s < r) or np.any(d_o < r))
    h_s = np.array([row["h_s"] for row in log])
    return RunMetrics(
        avg_velocity=float(speed.mean()),
        peak_velocity=float(speed.max()),
        risk_index=float(risk.mean()),
        success=reached and not collided,
        min_h_s=float(h_s.min()),
        collided=collided,
        reached_goal=reached,
        reason=reason,
        degraded_steps=int(sum(row["degraded"] for row in log)),
        steps=len(log),
    )


# -- scenario construction -----------------------------------------------------------------


class ForestError(RuntimeError):
    pass


def generate_forest(density: float, area, diameter_range=(0.4, 0.6), min_spacing: float = 0.9,
                    seed: int = 0, keep_clear=(), clearance: float = 1.5, height: float = 3.0,
                    max_attempts_per_tree: int = 2000):
    """Rejection-sampled cylinders ``(cx, cy, diameter, height)``.

    ``area`` is ``(x0, y0, x1, y1)``; the count is ``round(density * area)``.
    """
    x0, y0, x1, y1 = area
    count = int(round(density * (x1 - x0) * (y1 - y0)))
    rng = np.random.default_rng(seed)
    centers: list = []
    out = []
    attempts = 0
    clear = [np.asarray(p, float)[:2] for p in keep_clear]
    while len(out) < count:
        attempts += 1
        if attempts > max_attempts_per_tree * max(count, 1):
            raise ForestError(f"could not place {count} trees at spacing {min_spacing}; lower the density")
        c = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
        if any(np.linalg.norm(c - q) < min_spacing for q in centers):
            continue
        if any(np.linalg.norm(c - q) < clearance for q in clear):
            continue
        centers.append(c)
        out.append((float(c[0]), float(c[1]), float(rng.uniform(*diameter_range)), float(height)))
    return out


@dataclass
class World:
    grid: OccupancyGrid
    df: object
    cylinders: list
    ellipsoids: list
    start: np.ndarray
    goal: np.ndarray


def build_world(spec: ScenarioSpec) -> World:
    """Apply the seed's jitter and rasterize the static map."""
    rng = np.random.default_rng(spec.seed)
    start = np.asarray(spec.start, float).copy()
    start[:2] += rng.uniform(-1.0, 1.0, 2) * spec.jitter_start
    cylinders = [tuple(c) for c in spec.cylinders]
    if spec.forest:
        f = spec.forest
        cylinders += generate_forest(f["density"], f["area"], tuple(f.get("diameter", (0.4, 0.6))),
                                     f.get("min_spacing", 0.9), f.get("seed", spec.seed),
                                     keep_clear=(spec.start, spec.goal), height=f.get("height", spec.size[2]))
    jit = rng.uniform(-1.0, 1.0, (len(cylinders), 2)) * spec.jitter_obstacles
    cylinders = [(c[0] + j[0], c[1] + j[1], c[2], c[3]) for c, j in zip(cylinders, jit)]
    ellipsoids = []
    for desc in spec.dynamic_obstacles:
        desc = copy.deepcopy(desc)
        mot = desc["motion"]
        if mot["type"] == "back_and_forth":
            mot["offset"] = mot.get("offset", 0.0) + float(rng.uniform(0.0, 1.0)) * spec.jitter_obstacles
        ellipsoids.append(make_ellipsoid(desc))
    dims = tuple(int(round(s / spec.resolution)) for s in spec.size)
    grid = rasterize_cylinders(OccupancyGrid.empty(spec.resolution, spec.origin, dims), cylinders)
    return World(grid, build_esdf(grid), cylinders, ellipsoids, start, np.asarray(spec.goal, float))


@dataclass
class GlobalPlan:
    search: object
    spline: object
    reference: object


def plan_global(spec: ScenarioSpec, world: World) -> GlobalPlan:
    sr = search(NodeState(world.start, np.zeros(3)), NodeState(world.goal, np.zeros(3)), world.grid, spec.search)
    if not sr.segments:
        raise NoPathError("start already within goal tolerance")
    ps, _ = sr.knots()
    length = float(np.sum(np.linalg.norm(np.diff(np.array(ps), axis=0), axis=1)))
    n_points = max(8, int(math.ceil(length / spec.sim.spline_spacing)) + 3)
    init = fit_control_points(sr, n_points)
    opt = optimize_spline(init, world.df, spec.spline, world.start, world.goal)
    return GlobalPlan(sr, opt, to_reference(opt))


# -- closed loop ------------------------------------------------------------------------------


@dataclass
class EpisodeResult:
    metrics: RunMetrics
    log: list
    timing: list
    plan: GlobalPlan | None
    world: World


def _dynamic_distances(p, world: World, t: float):
    """Surface distance ``||p - p_o|| - l_o`` to every ellipsoid at time ``t``."""
    out = []
    for e in world.ellipsoids:
        p_o, _ = obstacle_position_at(e, t)
        rel = (np.asarray(p) - p_o)[None, :]
        l_o, _ = _boundary_distance_batch(rel @ e.rotation, e.axes)
        out.append(float(np.linalg.norm(rel) - l_o[0]))
    return out


def run_episode(spec: ScenarioSpec) -> EpisodeResult:
    """Global plan followed by the 50 Hz observer / MPCC / plant loop."""
    world = build_world(spec)
    sim = spec.sim
    params = spec.quad
    cbf_cfg = spec.cbf
    mode = {"cbf": "cbf", "dc": "distance", "distance": "distance"}[spec.constraint]
    mcfg = replace(spec.mpcc, constraint_mode=mode)
    try:
        plan = plan_global(spec, world)
    except (NoPathError, ValueError) as exc:
        row = _empty_row(world.start)
        m = aggregate_metrics([row], world.goal, sim.goal_tolerance, cbf_cfg.r, reason=f"global planner: {exc}")
        m.success = False
        return EpisodeResult(m, [row], [], None, world)
    ref = plan.reference
    rng = np.random.default_rng(spec.seed + 7919)
    gains = gains_from_pole(sim.gpio_pole)
    x = QuadState.at_rest(world.start)
    T = params.hover_thrust
    obs = GpioState(v_hat=x.v.copy())
    prog = ProgressState(0.0, 0.0)
    u_prev = np.zeros(4)
    applied = np.zeros(5)
    warm = None
    log, timing = [], []
    reason = "timeout"
    n_steps = int(round(sim.t_max / sim.dt))
    static_map = world.df if world.grid.occupied.any() else None

    def sigma_true(t, v):
        s = -sim.drag * np.asarray(v) / params.m
        for ev in spec.disturbances:
            if ev.active(t):
                s = s + np.asarray(ev.force, float) / params.m
        return s

    for i in range(n_steps):
        t = i * sim.dt
        v_meas = x.v + (rng.normal(0.0, sim.noise, 3) if sim.noise > 0 else 0.0)
        sigma_hat = disturbance_for_mpcc(obs) if spec.gpio else np.zeros(3)
        forecasts = []
        for e in world.ellipsoids:
            p_o, v_o = obstacle_position_at(e, t)
            forecasts.append(ObstacleForecast.extrapolate(p_o, v_o, e.axes, e.rotation, mcfg.dt, mcfg.N + 3))
        pb = build_problem(x, T, prog, ref, forecasts, static_map, sigma_hat, mcfg, cbf_cfg, params, u_prev)
        sol = solve(pb, warm)
        if sol.degraded and i > 0:
            u = applied.copy()       # zero-order hold of the previous input
        else:
            u = sol.first_input
        warm = sol
        if pb.terminal:
            u[4] = 0.0
        # record the state at time t before integrating
        d_s = float(distance_query(world.df, x.p)[0])
        d_o = _dynamic_distances(x.p, world, t)
        risks = [risk_index(d_s, cbf_cfg.r, cbf_cfg.d_risk)] + [risk_index(d, cbf_cfg.r, cbf_cfg.d_risk) for d in d_o]
        e_l, e_c = lag_contour_errors(x.p, prog.theta, ref)
        sig = sigma_true(t, x.v)
        row = {
            "t": t, "px": x.p[0], "py": x.p[1], "pz": x.p[2], "vx": x.v[0], "vy": x.v[1], "vz": x.v[2],
            "qw": x.q[0], "qx": x.q[1], "qy": x.q[2], "qz": x.q[3],
            "T": T, "zeta": u[0], "wx": u[1], "wy": u[2], "wz": u[3],
            "theta": prog.theta, "v_theta": prog.v_theta,
            "sigma_x": sig[0], "sigma_y": sig[1], "sigma_z": sig[2],
            "sigma_hat_x": obs.z1_hat[0], "sigma_hat_y": obs.z1_hat[1], "sigma_hat_z": obs.z1_hat[2],
            "sigma_hat_norm": float(np.linalg.norm(obs.z1_hat)),
            "d_static": d_s, "h_s": d_s - cbf_cfg.margin,
            "h_o_min": (min(d_o) - cbf_cfg.margin) if d_o else float("inf"),
            "d_dynamic": min(d_o) if d_o else float("inf"),
            "risk": max(risks), "e_l": float(np.linalg.norm(e_l)), "e_c": float(np.linalg.norm(e_c)),
            "tilt": tilt_angle(x.q), "iterations": sol.iterations, "degraded": int(sol.degraded),
            "min_cbf_residual": sol.min_cbf_residual,
        }
        log.append(row)
        timing.append({"t": t, "solve_ms": 1e3 * sol.solve_time, "iterations": sol.iterations})
        if np.linalg.norm(x.p - world.goal) <= sim.goal_tolerance:
            reason = "goal"
            break
        if d_s < cbf_cfg.r or any(d < cbf_cfg.r for d in d_o):
            reason = "collision"
            break
        # apply the first input over one control period
        T_cmd = float(np.clip(T + u[0] * sim.dt, params.thrust_min, params.thrust_max))
        omega = u[1:4]
        t0 = t
        x_new = simulate_plant(x, ControlInput(T_cmd, omega), lambda tt: sigma_true(tt, x.v), sim.dt,
                               sim.substeps, params, t0)
        obs = update(obs, v_meas, x.q, T_cmd, params, gains, sim.dt) if spec.gpio else obs
        x, T = x_new, T_cmd
        applied = u.copy()
        u_prev = u[:4].copy()
        if not pb.terminal:
            th = prog.theta + prog.v_theta * sim.dt + 0.5 * u[4] * sim.dt**2
            vt = float(np.clip(prog.v_theta + u[4] * sim.dt, 0.0, mcfg.v_theta_max))
            prog = ProgressState(float(min(max(th, 0.0), ref.length)), vt)
        if not np.all(np.isfinite(x.p)) or np.linalg.norm(x.v) > 50.0:
            reason = "diverged"
            break
    metrics = aggregate_metrics(log, world.goal, sim.goal_tolerance, cbf_cfg.r, reason)
    return EpisodeResult(metrics, log, timing, plan, world)


def _empty_row(p) -> dict:
    row = {c: 0.0 for c in LOG_COLUMNS}
    row.update({"px": p[0], "py": p[1], "pz": p[2], "d_static": float("inf"), "h_s": float("inf"), "d_dynamic": float("inf")})
    return row


def write_log(path, log: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for row in log:
            w.writerow([repr(float(row[c])) for c in LOG_COLUMNS])


def read_log(path) -> list:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# -- batches -----------------------------------------------------------------------------------

METRIC_NAMES = ("avg_velocity", "peak_velocity", "risk_index", "min_h_s")


def batch(specs) -> list:
    """Run every spec and return ``(label, seed, metrics)`` tuples."""
    out = []
    for s in specs:
        res = run_episode(s)
        out.append((s.variant_label, s.seed, res.metrics))
    return out


def summarize(results) -> list:
    """One row per variant with mean / std of each metric and the success rate."""
    rows = []
    for label in sorted({r[0] for r in results}):
        ms = [r[2] for r in results if r[0] == label]
        row = {"variant": label, "runs": len(ms)}
        for name in METRIC_NAMES:
            vals = np.array([getattr(m, name) for m in ms], float)
            row[f"{name}_avg"] = float(vals.mean())
            row[f"{name}_std"] = float(vals.std())
        row["success_rate"] = float(np.mean([m.success for m in ms]))
        rows.append(row)
    return rows


def format_table(rows) -> str:
    if not rows:
        return ""
    cols = list(rows[0].keys())
    cells = [[f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def write_table_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
