"""Layout heatmaps, augmentation, and spatially-conditioned agent spawning."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose2
from .occupancy import GlobalMap, OccupancyGrid, crop
from .routing import RouteNetwork, astar

log = logging.getLogger(__name__)

HEATMAP_SIZE = 200
KERNEL_RADIUS = 3          # cells; also the NMS suppression radius
KERNEL_SIGMA = 1.0         # unit-sigma Gaussian, truncated at the radius
MAX_VEHICLES = 10


@dataclass
class LayoutEntry:
    x: float               # meters, local frame
    y: float
    static: bool = False


@dataclass
class AgentLayout:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)


@dataclass
class AgentAsset:
    length: float = 4.5
    width: float = 1.9
    height: float = 1.6

    def __post_init__(self):
        if min(self.length, self.width, self.height) <= 0:
            raise ValueError("asset dims must be positive")


DEFAULT_ASSETS = (
    AgentAsset(4.5, 1.9, 1.6),
    AgentAsset(5.2, 2.0, 1.9),
    AgentAsset(4.2, 1.8, 1.5),
)


@dataclass(eq=False)
class Agent:
    position: np.ndarray           # (2,) world meters
    heading: np.ndarray            # unit vector
    speed: float
    route: np.ndarray              # (N, 2) world meters
    target: np.ndarray             # (2,)
    asset: AgentAsset
    static: bool = False
    route_s: float = 0.0           # arc-length progress along the route
    lane_id: int = -1
    lc_cooldown: int = 0
    active: bool = True
    is_ego: bool = False

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.heading = np.asarray(self.heading, dtype=float)
        n = np.linalg.norm(self.heading)
        if n > 0:
            self.heading = self.heading / n
        self.route = np.asarray(self.route, dtype=float)

    @property
    def yaw(self) -> float:
        return math.atan2(self.heading[1], self.heading[0])


def encode_heatmap(layout: AgentLayout, meters_per_cell: float) -> np.ndarray:
    """Signed sum of unit-peak Gaussian kernels: +1 peaks for static vehicles,
    -1 for dynamic, truncated at the kernel radius."""
    h = np.zeros((HEATMAP_SIZE, HEATMAP_SIZE))
    r = KERNEL_RADIUS
    offs = np.arange(-r, r + 1)
    ox, oy = np.meshgrid(offs, offs, indexing="ij")
    kernel = np.exp(-(ox ** 2 + oy ** 2) / (2.0 * KERNEL_SIGMA ** 2))
    kernel[ox ** 2 + oy ** 2 > r ** 2] = 0.0
    for e in layout.entries:
        cx = int(math.floor(e.x / meters_per_cell))
        cy = int(math.floor(e.y / meters_per_cell))
        if not (0 <= cx < HEATMAP_SIZE and 0 <= cy < HEATMAP_SIZE):
            raise ValueError(f"layout entry ({e.x}, {e.y}) out of bounds")
        sign = 1.0 if e.static else -1.0
        x0, x1 = max(cx - r, 0), min(cx + r + 1, HEATMAP_SIZE)
        y0, y1 = max(cy - r, 0), min(cy + r + 1, HEATMAP_SIZE)
        h[x0:x1, y0:y1] += sign * kernel[x0 - cx + r:x1 - cx + r,
                                         y0 - cy + r:y1 - cy + r]
    return h


def decode_heatmap(h: np.ndarray, meters_per_cell: float,
                   peak_threshold: float = 0.5) -> AgentLayout:
    """Non-maximum suppression over |h|: local maxima above the threshold
    within the kernel radius become vehicles; the peak sign sets the state."""
    mag = np.abs(h)
    order = np.argsort(mag, axis=None)[::-1]
    taken = np.zeros(h.shape, dtype=bool)
    entries = []
    r = KERNEL_RADIUS
    for flat in order:
        cx, cy = np.unravel_index(flat, h.shape)
        if mag[cx, cy] <= peak_threshold:
            break
        if taken[cx, cy]:
            continue
        x0, x1 = max(cx - r, 0), min(cx + r + 1, h.shape[0])
        y0, y1 = max(cy - r, 0), min(cy + r + 1, h.shape[1])
        taken[x0:x1, y0:y1] = True
        entries.append(LayoutEntry(
            (cx + 0.5) * meters_per_cell, (cy + 0.5) * meters_per_cell,
            static=h[cx, cy] > 0))
    return AgentLayout(entries)


def write_heatmap(h: np.ndarray, meters_per_cell: float, path) -> None:
    with open(path, "wb") as fh:
        fh.write(b"HEATMAP1")
        fh.write(struct.pack("<IId", h.shape[0], h.shape[1], meters_per_cell))
        fh.write(np.asarray(h, dtype="<f4").tobytes())


def read_heatmap(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != b"HEATMAP1":
        raise ValueError("not a heatmap file")
    w, hgt, mpc = struct.unpack_from("<IId", data, 8)
    payload = np.frombuffer(data[24:], dtype="<f4")
    if payload.size != w * hgt:
        raise ValueError("truncated heatmap payload")
    return payload.reshape(w, hgt).astype(float), mpc


GLOBAL_TRANSFORMS = ("identity", "rot90", "rot180", "rot270", "flip_x", "flip_y")


def _transform_cell(t: str, cx: float, cy: float, w: int, h: int):
    if t == "identity":
        return cx, cy
    if t == "rot90":
        return cy, w - 1 - cx
    if t == "rot180":
        return w - 1 - cx, h - 1 - cy
    if t == "rot270":
        return h - 1 - cy, cx
    if t == "flip_x":
        return w - 1 - cx, cy
    if t == "flip_y":
        return cx, h - 1 - cy
    raise ValueError(t)


def _transform_volume(t: str, labels: np.ndarray) -> np.ndarray:
    if t == "identity":
        return labels.copy()
    if t == "rot90":
        return np.rot90(labels, k=3, axes=(0, 1)).copy()
    if t == "rot180":
        return np.rot90(labels, k=2, axes=(0, 1)).copy()
    if t == "rot270":
        return np.rot90(labels, k=1, axes=(0, 1)).copy()
    if t == "flip_x":
        return labels[::-1, :, :].copy()
    if t == "flip_y":
        return labels[:, ::-1, :].copy()
    raise ValueError(t)


def augment(layout: AgentLayout, grid: OccupancyGrid, seed: int,
            transform: str = None, perturb: bool = True):
    """Two-stage augmentation of a (layout, grid) pair.

    1. Cap the layout at 10 vehicles by uniform subsampling.
    2. Perturb each center within a drivable 5x5 cell neighborhood.
    3. Apply one shared global transform (rotation/flip) to both members.
    """
    rng = np.random.default_rng(seed)
    entries = list(layout.entries)
    if len(entries) > MAX_VEHICLES:
        keep = rng.choice(len(entries), size=MAX_VEHICLES, replace=False)
        entries = [entries[i] for i in sorted(keep)]

    vox = grid.voxel_size
    drivable = grid.labels[:, :, 0] == grid.table.road_id
    W, H = drivable.shape
    out_entries = []
    for e in entries:
        cx = int(math.floor(e.x / vox))
        cy = int(math.floor(e.y / vox))
        if perturb:
            cands = [(cx + dx, cy + dy)
                     for dx in range(-2, 3) for dy in range(-2, 3)
                     if 0 <= cx + dx < W and 0 <= cy + dy < H
                     and drivable[cx + dx, cy + dy]]
            if cands:
                cx, cy = cands[rng.integers(0, len(cands))]
        out_entries.append(LayoutEntry((cx + 0.5) * vox, (cy + 0.5) * vox, e.static))

    if transform is None:
        transform = GLOBAL_TRANSFORMS[rng.integers(0, len(GLOBAL_TRANSFORMS))]
    new_labels = _transform_volume(transform, grid.labels)
    final_entries = []
    for e in out_entries:
        cx = int(math.floor(e.x / vox))
        cy = int(math.floor(e.y / vox))
        tx, ty = _transform_cell(transform, cx, cy, W, H)
        final_entries.append(LayoutEntry((tx + 0.5) * vox, (ty + 0.5) * vox, e.static))
    new_grid = OccupancyGrid(new_labels, vox, grid.origin, grid.table)
    return AgentLayout(final_entries), new_grid


class FileLayoutSource:
    """Layout source backed by an externally generated heatmap file."""

    def __init__(self, path, peak_threshold: float = 0.5):
        self.heatmap, self.meters_per_cell = read_heatmap(path)
        self.peak_threshold = peak_threshold

    def sample(self, local_grid: OccupancyGrid, rng) -> AgentLayout:
        return decode_heatmap(self.heatmap, self.meters_per_cell, self.peak_threshold)


class ProceduralLayoutSource:
    """Uniform stand-in for the learned layout generator: up to 10 vehicles at
    random lane points with 8 m minimum spacing, 20% static."""

    def __init__(self, lanes, min_spacing: float = 8.0, p_static: float = 0.2,
                 max_vehicles: int = MAX_VEHICLES):
        self.lane_points = (np.concatenate([l.points for l in lanes])
                            if lanes else np.zeros((0, 2)))
        self.min_spacing = min_spacing
        self.p_static = p_static
        self.max_vehicles = max_vehicles

    def sample(self, local_grid: OccupancyGrid, rng) -> AgentLayout:
        anchor = local_grid.origin
        dims = local_grid.dims
        vox = local_grid.voxel_size
        half = np.array([dims[0], dims[1]]) * vox / 2.0
        inv = anchor.inverse()
        local = inv.transform_point(self.lane_points) if len(self.lane_points) else np.zeros((0, 2))
        inside = np.all(np.abs(local) < half * 0.9, axis=1)
        pool = self.lane_points[inside]
        k = int(rng.integers(0, self.max_vehicles + 1))
        chosen = []
        order = rng.permutation(len(pool))
        for i in order:
            if len(chosen) >= k:
                break
            p = pool[i]
            if all(np.linalg.norm(p - q) >= self.min_spacing for q, _ in chosen):
                chosen.append((p, rng.random() < self.p_static))
        entries = []
        for p, static in chosen:
            lp = inv.transform_point(p) + half  # local frame, corner origin
            entries.append(LayoutEntry(float(lp[0]), float(lp[1]), static))
        return AgentLayout(entries)


def _route_heading(route: np.ndarray) -> np.ndarray:
    if len(route) >= 2:
        d = route[1] - route[0]
        n = np.linalg.norm(d)
        if n > 0:
            return d / n
    return np.array([1.0, 0.0])


def spawn_agents(anchor: Pose2, b_ego: bool, gmap: GlobalMap, lanes,
                 network: RouteNetwork, valid_endpoints_m, assets,
                 speed_dist, layout_source, rng,
                 crop_dims=(200, 200, 16), snap_dist: float = 5.0):
    """Spawn agents around an anchor pose.

    The layout source proposes local positions (the anchor itself is appended
    when b_ego); each agent gets a Normal(mu, sigma) speed clamped at zero, a
    uniform valid endpoint target, a uniform asset, an A* route over the lane
    network, and the route tangent as initial heading. Agents that cannot
    snap or route are discarded with a log entry.
    """
    if not lanes:
        raise ValueError("cannot spawn without lanes")
    if len(valid_endpoints_m) == 0:
        raise ValueError("cannot spawn without valid endpoints")
    mu_v, sigma_v = speed_dist
    local_grid = crop(gmap, anchor, crop_dims)
    layout = layout_source.sample(local_grid, rng)

    dims = local_grid.dims
    half = np.array([dims[0], dims[1]]) * local_grid.voxel_size / 2.0
    world_positions = []
    for e in layout.entries:
        local = np.array([e.x, e.y]) - half
        world_positions.append((anchor.transform_point(local), e.static, False))
    if b_ego:
        world_positions.append((anchor.position, False, True))

    endpoints = np.asarray(valid_endpoints_m, dtype=float)
    agents = []
    for pos, static, is_ego in world_positions:
        speed = max(0.0, rng.normal(mu_v, sigma_v))
        target = endpoints[rng.integers(0, len(endpoints))]
        asset = assets[rng.integers(0, len(assets))]
        node = network.nearest_node(pos, snap_dist)
        if node is None:
            log.info("agent at %s too far from any lane; discarded", pos)
            continue
        if static:
            snap = network.positions[node]
            heading = _tangent_at(network, node)
            agents.append(Agent(snap, heading, 0.0, np.asarray([snap]),
                                target, asset, static=True,
                                lane_id=network.lane_of[node]))
            continue
        goal = network.nearest_node(target, math.inf)
        found = astar(network.adjacency, network.positions, node, goal)
        if found is None:
            log.info("no route from %s to %s; agent discarded", pos, target)
            continue
        path, _ = found
        route = network.positions[path]
        heading = _route_heading(route)
        agents.append(Agent(route[0].copy(), heading, speed, route, target,
                            asset, lane_id=network.lane_of[node], is_ego=is_ego))
    return agents


def _tangent_at(network: RouteNetwork, node: int) -> np.ndarray:
    for nbr, _ in network.adjacency.get(node, ()):
        if network.lane_of[nbr] == network.lane_of[node]:
            d = network.positions[nbr] - network.positions[node]
            n = np.linalg.norm(d)
            if n > 0:
                return d / n
    return np.array([1.0, 0.0])
