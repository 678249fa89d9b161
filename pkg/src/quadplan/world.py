"""Voxel occupancy map, exact Euclidean distance field and dynamic ellipsoids."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

SENTINEL = float(np.finfo(np.float64).max)
GRAVITY = 9.81


@dataclass(frozen=True)
class OccupancyGrid:
    """Axis-aligned voxel grid.

    Cell ``(i, j, k)`` covers ``origin + [i, i+1) * resolution`` (and likewise for
    the other axes); its center is ``origin + (index + 0.5) * resolution``.
    """

    resolution: float
    origin: np.ndarray
    dims: tuple[int, int, int]
    occupied: np.ndarray  # bool array of shape ``dims``

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be 3 positive integers, got {self.dims}")
        occ = np.asarray(self.occupied, dtype=bool)
        if occ.shape != dims:
            raise ValueError(f"occupied has shape {occ.shape}, expected {dims}")
        occ = occ.copy()
        occ.flags.writeable = False
        origin = np.array(self.origin, dtype=float).reshape(3)
        origin.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "occupied", occ)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def empty(cls, resolution, origin, dims) -> OccupancyGrid:
        return cls(resolution, np.asarray(origin, float), tuple(dims), np.zeros(tuple(dims), bool))

    @classmethod
    def from_indices(cls, resolution, origin, dims, indices) -> OccupancyGrid:
        occ = np.zeros(tuple(dims), bool)
        idx = np.asarray(list(indices), dtype=int).reshape(-1, 3)
        if len(idx):
            if (idx < 0).any() or (idx >= np.asarray(dims)).any():
                raise ValueError("occupied index outside grid dims")
            occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
        return cls(resolution, np.asarray(origin, float), tuple(dims), occ)

    @property
    def occupied_indices(self) -> np.ndarray:
        return np.argwhere(self.occupied)

    @property
    def upper(self) -> np.ndarray:
        return self.origin + np.asarray(self.dims) * self.resolution

    def cell_center(self, index) -> np.ndarray:
        return self.origin + (np.asarray(index, float) + 0.5) * self.resolution

    def cell_of(self, p) -> np.ndarray:
        """Integer cell index of point(s) ``p`` (may lie outside the grid)."""
        return np.floor((np.asarray(p, float) - self.origin) / self.resolution).astype(np.int64)

    def in_bounds(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        return np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=-1)

    def is_free(self, p) -> np.ndarray:
        """True where ``p`` is inside the grid and in an unoccupied cell."""
        idx = self.cell_of(p)
        ok = self.in_bounds(idx)
        out = np.zeros(ok.shape, bool)
        if np.ndim(ok) == 0:
            return bool(ok and not self.occupied[tuple(idx)])
        sel = idx[ok]
        out[ok] = ~self.occupied[sel[:, 0], sel[:, 1], sel[:, 2]]
        return out

    # serialization: JSON header plus run-length encoded occupied cells (C order)
    def to_json(self) -> dict:
        flat = self.occupied.ravel()
        padded = np.concatenate([[False], flat, [False]]).astype(np.int8)
        edges = np.flatnonzero(np.diff(padded))
        runs = [[int(s), int(e - s)] for s, e in zip(edges[::2], edges[1::2])]
        return {
            "resolution": self.resolution,
            "origin": [float(v) for v in self.origin],
            "dims": list(self.dims),
            "occupied_runs": runs,
        }

    @classmethod
    def from_json(cls, data: dict) -> OccupancyGrid:
        dims = tuple(int(d) for d in data["dims"])
        flat = np.zeros(int(np.prod(dims)), bool)
        for start, length in data.get("occupied_runs", []):
            flat[start : start + length] = True
        return cls(float(data["resolution"]), np.asarray(data["origin"], float), dims, flat.reshape(dims))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> OccupancyGrid:
        return cls.from_json(json.loads(Path(path).read_text()))


@numba.njit(cache=True)
def _lower_envelope_1d(f, out, v, z):
    # Felzenszwalb-Huttenlocher squared distance transform along one line.
    # Values are exact integers stored in float64; INF marks "no site".
    n = f.shape[0]
    inf = np.inf
    k = -1
    for q in range(n):
        if f[q] == inf:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -inf
            z[1] = inf
            continue
        while True:
            p = v[k]
            s = ((f[q] + q * q) - (f[p] + p * p)) / (2.0 * (q - p))
            if s <= z[k]:
                k -= 1
                if k < 0:
                    break
            else:
                break
        k += 1
        v[k] = q
        z[k] = -inf if k == 0 else s
        z[k + 1] = inf
    if k < 0:
        for q in range(n):
            out[q] = inf
        return
    j = 0
    for q in range(n):
        while z[j + 1] < q:
            j += 1
        p = v[j]
        out[q] = (q - p) * (q - p) + f[p]


@numba.njit(cache=True)
def _edt_axis(a, axis):
    nx, ny, nz = a.shape
    n = a.shape[axis]
    f = np.empty(n)
    out = np.empty(n)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    if axis == 0:
        for j in range(ny):
            for k in range(nz):
                for i in range(nx):
                    f[i] = a[i, j, k]
                _lower_envelope_1d(f, out, v, z)
                for i in range(nx):
                    a[i, j, k] = out[i]
    elif axis == 1:
        for i in range(nx):
            for k in range(nz):
                for j in range(ny):
                    f[j] = a[i, j, k]
                _lower_envelope_1d(f, out, v, z)
                for j in range(ny):
                    a[i, j, k] = out[j]
    else:
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    f[k] = a[i, j, k]
                _lower_envelope_1d(f, out, v, z)
                for k in range(nz):
                    a[i, j, k] = out[k]


def squared_cell_distance(occupied: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance (in cells) to the nearest occupied cell."""
    a = np.where(occupied, 0.0, np.inf)
    for axis in range(3):
        _edt_axis(a, axis)
    return a


@dataclass(frozen=True)
class DistanceField:
    """Center-to-center distance (meters) from every cell to the nearest occupied cell."""

    grid: OccupancyGrid
    distance: np.ndarray
    empty: bool = False

    @property
    def resolution(self):
        return self.grid.resolution

    @property
    def origin(self):
        return self.grid.origin

    @property
    def dims(self):
        return self.grid.dims


def build_esdf(grid: OccupancyGrid) -> DistanceField:
    """Exact Euclidean distance transform of ``grid``.

    An empty grid maps every cell to :data:`SENTINEL`.
    """
    if not grid.occupied.any():
        dist = np.full(grid.dims, SENTINEL)
        dist.flags.writeable = False
        return DistanceField(grid, dist, empty=True)
    sq = squared_cell_distance(grid.occupied)
    dist = grid.resolution * np.sqrt(sq)
    dist.flags.writeable = False
    return DistanceField(grid, dist)


def distance_query(df: DistanceField, p):
    """Trilinear interpolation of the distance field and its analytic gradient.

    Accepts a single point (shape ``(3,)``) or a batch (shape ``(n, 3)``).

    Returns:
        (d, grad, clamped): distance, gradient of the interpolant, and a flag that
        is True where ``p`` was outside the grid box and had to be clamped.
    """
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    pts = p.reshape(-1, 3)
    dims = np.asarray(df.dims)
    res = df.resolution
    clamped = np.any((pts < df.origin) | (pts > df.origin + dims * res), axis=1)
    if df.empty:
        d = np.full(len(pts), SENTINEL)
        g = np.zeros((len(pts), 3))
    else:
        raw = (pts - df.origin) / res - 0.5
        hi = (dims - 1).astype(float)
        flat_axis = (raw < 0.0) | (raw > hi) | (dims == 1)
        u = np.clip(raw, 0.0, hi)
        i0 = np.minimum(np.floor(u).astype(np.int64), np.maximum(dims - 2, 0))
        i1 = np.minimum(i0 + 1, dims - 1)
        w = u - i0
        D = df.distance
        c = np.empty((len(pts), 2, 2, 2))
        for a, ia in enumerate((i0[:, 0], i1[:, 0])):
            for b, ib in enumerate((i0[:, 1], i1[:, 1])):
                for e, ie in enumerate((i0[:, 2], i1[:, 2])):
                    c[:, a, b, e] = D[ia, ib, ie]
        wx, wy, wz = w[:, 0], w[:, 1], w[:, 2]
        cx = c[:, 0] * (1 - wx)[:, None, None] + c[:, 1] * wx[:, None, None]
        cxy = cx[:, 0] * (1 - wy)[:, None] + cx[:, 1] * wy[:, None]
        d = cxy[:, 0] * (1 - wz) + cxy[:, 1] * wz
        gz = cxy[:, 1] - cxy[:, 0]
        dx = c[:, 1] - c[:, 0]
        dxy = dx[:, 0] * (1 - wy)[:, None] + dx[:, 1] * wy[:, None]
        gx = dxy[:, 0] * (1 - wz) + dxy[:, 1] * wz
        dy = cx[:, 1] - cx[:, 0]
        gy = dy[:, 0] * (1 - wz) + dy[:, 1] * wz
        g = np.stack([gx, gy, gz], axis=1) / res
        # the clamped interpolant is flat along clamped axes
        g[flat_axis] = 0.0
    if single:
        return float(d[0]), g[0], bool(clamped[0])
    return d, g, clamped


# -- dynamic obstacles --------------------------------------------------------


@dataclass(frozen=True)
class ConstantVelocity:
    velocity: tuple

    def at(self, p0, t):
        v = np.asarray(self.velocity, float)
        return np.asarray(p0, float) + v * t, v


@dataclass(frozen=True)
class BackAndForth:
    """Triangle-wave motion between ``start`` and ``end`` at constant ``speed``.

    ``offset`` is the distance along the segment (on the outbound leg) at t = 0.
    """

    start: tuple
    end: tuple
    speed: float
    offset: float = 0.0

    @property
    def period(self) -> float:
        length = float(np.linalg.norm(np.subtract(self.end, self.start)))
        return 2.0 * length / self.speed

    def at(self, p0, t):
        a = np.asarray(self.start, float)
        b = np.asarray(self.end, float)
        length = float(np.linalg.norm(b - a))
        if length == 0.0:
            return a.copy(), np.zeros(3)
        direction = (b - a) / length
        s = (self.offset + self.speed * t) % (2.0 * length)
        if s <= length:
            return a + direction * s, direction * self.speed
        return a + direction * (2.0 * length - s), -direction * self.speed


@dataclass(frozen=True)
class Pendulum:
    """Small-angle pendulum hanging from ``pivot``.

    The horizontal displacement along ``axis`` is ``amplitude * sin(w t + phase)``
    with ``w = sqrt(g / length)``; the bob stays on the circle of radius ``length``.
    """

    pivot: tuple
    length: float
    amplitude: float
    phase: float = 0.0
    axis: tuple = (1.0, 0.0, 0.0)

    @property
    def omega(self) -> float:
        return float(np.sqrt(GRAVITY / self.length))

    def at(self, p0, t):
        w = self.omega
        axis = np.asarray(self.axis, float)
        axis = axis / np.linalg.norm(axis)
        x = self.amplitude * np.sin(w * t + self.phase)
        xd = self.amplitude * w * np.cos(w * t + self.phase)
        depth = np.sqrt(self.length**2 - x**2)
        pos = np.asarray(self.pivot, float) + axis * x - np.array([0.0, 0.0, depth])
        vel = axis * xd + np.array([0.0, 0.0, x * xd / depth])
        return pos, vel


@dataclass(frozen=True)
class DynamicEllipsoid:
    """Moving ellipsoid with semi-axes ``l_x <= l_y <= l_z``.

    ``rotation`` has the ellipsoid axes as columns (expressed in the world frame),
    so ``rotation.T @ (p - center)`` gives body-frame coordinates.
    """

    axes: tuple
    motion: object
    position_at_epoch: tuple = (0.0, 0.0, 0.0)
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        lx, ly, lz = (float(a) for a in self.axes)
        if not 0 < lx <= ly <= lz:
            raise ValueError("semi-axes must satisfy 0 < l_x <= l_y <= l_z")
        R = np.asarray(self.rotation, float)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be orthonormal")
        object.__setattr__(self, "axes", (lx, ly, lz))
        object.__setattr__(self, "rotation", R)


def obstacle_position_at(e: DynamicEllipsoid, t: float):
    """Center position and velocity of ``e`` at time ``t``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    p, v = e.motion.at(e.position_at_epoch, t)
    return np.asarray(p, float), np.asarray(v, float)


def rasterize_cylinders(grid: OccupancyGrid, cylinders) -> OccupancyGrid:
    """Mark every cell whose center lies inside a vertical cylinder.

    Each cylinder is ``(cx, cy, diameter, height)`` standing on ``z = 0``.
    """
    occ = np.array(grid.occupied)
    centers = [grid.origin[a] + (np.arange(grid.dims[a]) + 0.5) * grid.resolution for a in range(3)]
    X, Y = np.meshgrid(centers[0], centers[1], indexing="ij")
    for cx, cy, diameter, height in cylinders:
        disk = (X - cx) ** 2 + (Y - cy) ** 2 <= (0.5 * diameter) ** 2
        zmask = (centers[2] >= 0.0) & (centers[2] <= height)
        occ |= disk[:, :, None] & zmask[None, None, :]
    return OccupancyGrid(grid.resolution, grid.origin, grid.dims, occ)

