"""Planar rigid-body math and grid warping primitives.

Everything here is pure: poses, twists, masks and warps are computed from
immutable inputs, so callers are free to parallelise across frames.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np


def normalize_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class Pose2:
    """Planar pose: translation in meters, yaw in radians, normalized to (-pi, pi]."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.yaw)):
            raise ValueError("pose components must be finite")
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    def compose(self, other: "Pose2") -> "Pose2":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2(-(c * self.x + s * self.y), -(-s * self.x + c * self.y), -self.yaw)

    def transform_point(self, p) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        p = np.asarray(p, dtype=float)
        return np.stack(
            [self.x + c * p[..., 0] - s * p[..., 1], self.y + s * p[..., 0] + c * p[..., 1]],
            axis=-1,
        )

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Twist:
    """Planar body velocity: vx, vy in m/s and yaw rate in rad/s."""

    vx: float
    vy: float
    omega: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.vx, self.vy, self.omega)):
            raise ValueError("twist components must be finite")


# Below this the closed form V-matrix degenerates numerically; use the
# pure-translation limit instead.
SMALL_ANGLE = 1e-8


def exp_twist(tw: Twist, dt: float) -> Pose2:
    """Exponential map of a constant planar twist over a time interval.

    For |omega*dt| below the small-angle threshold the displacement reduces to
    pure translation; otherwise the rotation couples into the translation via
    the closed-form V matrix.
    """
    if dt < 0:
        raise ValueError("dt must be non-negative")
    theta = tw.omega * dt
    if abs(theta) < SMALL_ANGLE:
        return Pose2(tw.vx * dt, tw.vy * dt, theta)
    sin_t, cos_t = math.sin(theta), math.cos(theta)
    # V = (1/theta) * [[sin t, -(1-cos t)], [1-cos t, sin t]]
    a = sin_t / theta
    b = (1.0 - cos_t) / theta
    px = (a * tw.vx - b * tw.vy) * dt
    py = (b * tw.vx + a * tw.vy) * dt
    return Pose2(px, py, theta)


@dataclass(frozen=True)
class Trajectory:
    """Timestamped pose sequence; timestamps strictly increasing."""

    samples: tuple  # of (time, Pose2)
    horizon: int = 0

    def __post_init__(self):
        if len(self.samples) < 1:
            raise ValueError("trajectory needs at least one sample")
        times = [t for t, _ in self.samples]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("timestamps must be strictly increasing")

    @property
    def poses(self):
        return [p for _, p in self.samples]

    def __len__(self):
        return len(self.samples)


def load_trajectory(path) -> Trajectory:
    """Read a trajectory from a JSON array of {t, x, y, yaw} records."""
    with open(path) as fh:
        records = json.load(fh)
    samples = tuple((r["t"], Pose2(r["x"], r["y"], r["yaw"])) for r in records)
    return Trajectory(samples)


def save_trajectory(traj: Trajectory, path) -> None:
    records = [{"t": t, "x": p.x, "y": p.y, "yaw": p.yaw} for t, p in traj.samples]
    with open(path, "w") as fh:
        json.dump(records, fh)


def _dest_source_coords(transform: Pose2, width: int, height: int, voxel_size: float):
    """Source-frame pixel coordinates of every destination cell center.

    ``transform`` maps source coordinates into the destination frame, so each
    destination cell samples the source at the inverse-transformed location.
    """
    inv = transform.inverse()
    xs = (np.arange(width) + 0.5) * voxel_size
    ys = (np.arange(height) + 0.5) * voxel_size
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    c, s = math.cos(inv.yaw), math.sin(inv.yaw)
    sx = (inv.x + c * gx - s * gy) / voxel_size
    sy = (inv.y + s * gx + c * gy) / voxel_size
    return sx, sy


def warp_grid(src: np.ndarray, transform: Pose2, voxel_size: float,
              mode: str = "bilinear", fill=0.0) -> np.ndarray:
    """Resample a (W, H[, C]) grid under a planar rigid transform.

    Gather formulation: every destination cell reads the source at the
    inverse-transformed location, which cannot leave holes. Out-of-bounds
    destinations are filled with ``fill``.
    """
    src = np.asarray(src)
    if src.size == 0:
        raise ValueError("zero-sized grid")
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    width, height = src.shape[0], src.shape[1]
    sx, sy = _dest_source_coords(transform, width, height, voxel_size)

    if mode == "nearest":
        ix = np.floor(sx).astype(np.int64)
        iy = np.floor(sy).astype(np.int64)
        inside = (ix >= 0) & (ix < width) & (iy >= 0) & (iy < height)
        out = np.full(src.shape, fill, dtype=src.dtype)
        out[inside] = src[ix[inside], iy[inside]]
        return out
    if mode == "bilinear":
        fx = sx - 0.5
        fy = sy - 0.5
        x0 = np.floor(fx).astype(np.int64)
        y0 = np.floor(fy).astype(np.int64)
        wx = fx - x0
        wy = fy - y0
        vals = np.zeros(src.shape[:2] + src.shape[2:], dtype=float)
        if src.ndim == 3:
            wx = wx[..., None]
            wy = wy[..., None]
        for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1)):
            xi = x0 + dx
            yi = y0 + dy
            ok = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
            w = (wx if dx else 1.0 - wx) * (wy if dy else 1.0 - wy)
            contrib = np.zeros_like(vals)
            contrib[ok] = src[xi[ok], yi[ok]]
            vals += w * contrib
        return vals.astype(float)
    raise ValueError(f"unknown warp mode {mode!r}")


def visibility_mask(transform: Pose2, width: int, height: int, voxel_size: float) -> np.ndarray:
    """Binary mask of destination cells whose source sample lies inside the
    source field of view [0, W) x [0, H). Purely geometric."""
    if width <= 0 or height <= 0:
        raise ValueError("mask dimensions must be positive")
    sx, sy = _dest_source_coords(transform, width, height, voxel_size)
    return (sx >= 0) & (sx < width) & (sy >= 0) & (sy < height)


def random_mask(width: int, height: int, p: float, seed: int) -> np.ndarray:
    """Bernoulli(1 - p) mask: each cell is 1 with probability 1 - p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("masking ratio must be in [0, 1]")
    rng = np.random.default_rng(seed)
    return rng.random((width, height)) >= p


def bresenham_line(x0: int, y0: int, x1: int, y1: int):
    """Integer cells of the Bresenham segment from (x0, y0) to (x1, y1), inclusive."""
    cells = []
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    x, y = x0, y0
    while True:
        cells.append((x, y))
        if x == x1 and y == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy
    return cells


def rasterize_trajectory(waypoints, width: int, height: int, voxel_size: float) -> np.ndarray:
    """Rasterize a waypoint polyline onto a (width, height) binary plane.

    Consecutive in-bounds waypoints are connected with Bresenham segments.
    """
    waypoints = np.asarray(waypoints, dtype=float)
    if waypoints.size == 0:
        raise ValueError("need at least one waypoint")
    cells = np.floor(waypoints / voxel_size).astype(np.int64)
    in_bounds = [
        (cx, cy) for cx, cy in cells
        if 0 <= cx < width and 0 <= cy < height
    ]
    out = np.zeros((width, height), dtype=bool)
    if not in_bounds:
        return out
    for (x0, y0), (x1, y1) in zip(in_bounds, in_bounds[1:]):
        for cx, cy in bresenham_line(x0, y0, x1, y1):
            out[cx, cy] = True
    x0, y0 = in_bounds[0]
    out[x0, y0] = True
    return out
