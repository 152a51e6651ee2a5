"""Closed-loop rolling-horizon traffic engine.

Each step runs three phases in order: rolling-horizon spawn/cull management,
per-agent longitudinal control (IDM along the planned route, with Bezier lane
changes on conflict), and voxel rendering of the local frame around the ego.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .agents import (DEFAULT_ASSETS, Agent, ProceduralLayoutSource,
                     _route_heading, spawn_agents)
from .geometry import Pose2
from .occupancy import GlobalMap, OccupancyGrid, crop, overlay
from .routing import RouteNetwork, astar, build_route_network

log = logging.getLogger(__name__)


@dataclass
class IdmParams:
    v0: float = 12.0           # desired speed, m/s
    a_max: float = 1.5
    b_comfort: float = 2.0
    s0: float = 2.0            # jam gap, meters
    t_headway: float = 1.5
    delta: float = 4.0
    b_emergency: float = 6.0

    def __post_init__(self):
        if min(self.v0, self.a_max, self.b_comfort, self.s0,
               self.t_headway, self.delta, self.b_emergency) <= 0:
            raise ValueError("IDM parameters must be positive")


@dataclass
class SimParams:
    dt: float = 0.5
    horizon: int = 20
    d_roll: float = 10.0
    d_pre: float = 30.0
    d_lc: float = 15.0         # lane-change trigger distance
    d_lat: float = 2.0         # lateral route-blocking tolerance
    fov_dims: tuple = (200, 200, 16)
    idm: IdmParams = field(default_factory=IdmParams)
    speed_mu: float = 8.0
    speed_sigma: float = 2.0
    lc_cooldown_steps: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0 or self.horizon < 1:
            raise ValueError("dt must be positive and horizon >= 1")
        if min(self.d_roll, self.d_pre, self.d_lc, self.d_lat) <= 0:
            raise ValueError("distances must be positive")


def idm_accel(v: float, v0: float, dv: float, s: float, idm: IdmParams) -> float:
    """Longitudinal IDM acceleration.

    s is the gap to the leader (inf when free road); dv = v - v_leader.
    Clamped to [-b_emergency, a_max]; a non-positive gap means emergency
    braking.
    """
    if s <= 0:
        return -idm.b_emergency
    free = 1.0 - (v / v0) ** idm.delta
    if math.isinf(s):
        interaction = 0.0
    else:
        s_star = idm.s0 + v * idm.t_headway + v * dv / (2.0 * math.sqrt(idm.a_max * idm.b_comfort))
        s_star = max(s_star, 0.0)
        interaction = (s_star / s) ** 2
    a = idm.a_max * (free - interaction)
    return float(np.clip(a, -idm.b_emergency, idm.a_max))


def _dist_point_polyline(p: np.ndarray, poly: np.ndarray) -> float:
    """Minimum distance from a point to a polyline."""
    if len(poly) == 1:
        return float(np.linalg.norm(p - poly[0]))
    a = poly[:-1]
    b = poly[1:]
    ab = b - a
    ap = p - a
    denom = (ab * ab).sum(axis=1)
    denom[denom == 0] = 1.0
    t = np.clip((ap * ab).sum(axis=1) / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return float(np.linalg.norm(proj - p, axis=1).min())


def select_leader(agent: Agent, others, d_lat: float = 2.0):
    """Nearest other agent within the forward cone (normalized dot > 0.5)
    that also lies within d_lat of the agent's planned route."""
    best, best_d = None, math.inf
    for other in others:
        if other is agent:
            continue
        rel = other.position - agent.position
        dist = np.linalg.norm(rel)
        if dist <= 1e-9:
            continue
        if float(rel @ agent.heading) / dist <= 0.5:
            continue
        if _dist_point_polyline(other.position, agent.route) >= d_lat:
            continue
        if dist < best_d:
            best, best_d = other, dist
    return best


def bezier_transition(p0: np.ndarray, h0: np.ndarray, p1: np.ndarray,
                      h1: np.ndarray, ds: float = 0.5) -> np.ndarray:
    """Cubic Bezier from p0 (tangent h0) to p1 (tangent h1), resampled at ds."""
    d = np.linalg.norm(p1 - p0)
    c0 = p0 + 0.3 * d * h0
    c1 = p1 - 0.3 * d * h1
    n = max(int(d / ds) * 4, 8)
    t = np.linspace(0.0, 1.0, n)[:, None]
    pts = ((1 - t) ** 3 * p0 + 3 * (1 - t) ** 2 * t * c0
           + 3 * (1 - t) * t ** 2 * c1 + t ** 3 * p1)
    # uniform arc resample
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] <= 0:
        return pts[:1]
    targets = np.arange(0.0, s[-1], ds)
    x = np.interp(targets, s, pts[:, 0])
    y = np.interp(targets, s, pts[:, 1])
    return np.stack([x, y], axis=1)


def maybe_lane_change(agent: Agent, leader: Agent, s: float, dv: float,
                      network: RouteNetwork, params: SimParams) -> bool:
    """Alg trigger: s < d_lc and (closing in, or head-on leader). On success
    the route becomes a Bezier transition onto the nearest parallel lane
    followed by an A* re-route to the original target."""
    if s >= params.d_lc:
        return False
    head_on = float(agent.heading @ leader.heading) < -0.5
    if not (dv > 0 or head_on):
        return False
    if agent.lc_cooldown > 0:
        return False
    adj = network.nearest_node_on_other_lane(
        agent.position, agent.lane_id, 2.0 * 3.6)
    if adj is None:
        return False
    p_adj = network.positions[adj]
    goal = network.nearest_node(agent.target, math.inf)
    found = astar(network.adjacency, network.positions, adj, goal)
    if found is None:
        return False
    path, _ = found
    tail = network.positions[path]
    h1 = _route_heading(tail)
    bez = bezier_transition(agent.position, agent.heading, p_adj, h1)
    agent.route = np.concatenate([bez, tail])
    agent.route_s = 0.0
    agent.lane_id = network.lane_of[adj]
    agent.lc_cooldown = params.lc_cooldown_steps
    return True


def _route_arclength(route: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(route, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def advance_along_route(agent: Agent, dist: float) -> None:
    """Move the agent dist meters along its route; completion deactivates it."""
    if len(agent.route) < 2:
        agent.active = agent.static
        return
    s = _route_arclength(agent.route)
    agent.route_s += dist
    if agent.route_s >= s[-1]:
        agent.position = agent.route[-1].copy()
        agent.active = False
        return
    x = np.interp(agent.route_s, s, agent.route[:, 0])
    y = np.interp(agent.route_s, s, agent.route[:, 1])
    new_pos = np.array([x, y])
    step = new_pos - agent.position
    n = np.linalg.norm(step)
    if n > 1e-9:
        agent.heading = step / n
    else:
        i = int(np.searchsorted(s, agent.route_s))
        i = min(max(i, 1), len(agent.route) - 1)
        d = agent.route[i] - agent.route[i - 1]
        dn = np.linalg.norm(d)
        if dn > 0:
            agent.heading = d / dn
    agent.position = new_pos


@dataclass
class SimState:
    agents: list
    ego: Agent
    ego_path: list                 # recorded Pose2 sequence the map was built from
    delta_d_ego: float = 0.0
    step_index: int = 0


def _fov_contains(ego_pose: Pose2, pos: np.ndarray, fov_dims, vox: float) -> bool:
    inv = ego_pose.inverse()
    local = inv.transform_point(pos)
    half = np.array([fov_dims[0], fov_dims[1]]) * vox / 2.0
    return bool(np.all(np.abs(local) <= half))


def _path_arclengths(poses) -> np.ndarray:
    pts = np.array([[p.x, p.y] for p in poses])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def _pose_at_offset(poses, s_path: np.ndarray, anchor_idx: int, offset: float):
    """Pose at a signed arc-length offset along the recorded path, or None
    when the path is exhausted in that direction."""
    target = s_path[anchor_idx] + offset
    if target < s_path[0] - 1e-9 or target > s_path[-1] + 1e-9:
        return None
    idx = int(np.clip(np.searchsorted(s_path, target), 0, len(poses) - 1))
    return poses[idx]


class Simulator:
    """Owns the world artifacts and runs the closed-loop engine."""

    def __init__(self, gmap: GlobalMap, lanes, valid_endpoints_m, ego_path,
                 params: SimParams = None, layout_source=None, assets=DEFAULT_ASSETS,
                 ego_speed_hook=None):
        self.gmap = gmap
        self.lanes = lanes
        self.network = build_route_network(lanes)
        self.valid_endpoints = np.asarray(valid_endpoints_m, dtype=float)
        self.ego_path = list(ego_path)
        self.params = params or SimParams()
        self.assets = assets
        self.layout_source = layout_source or ProceduralLayoutSource(lanes)
        self.ego_speed_hook = ego_speed_hook
        self.rng = np.random.default_rng(self.params.seed)
        self._s_path = _path_arclengths(self.ego_path)

    # -- spawning ---------------------------------------------------------

    def _spawn(self, anchor: Pose2, b_ego: bool):
        try:
            return spawn_agents(
                anchor, b_ego, self.gmap, self.lanes, self.network,
                self.valid_endpoints, self.assets,
                (self.params.speed_mu, self.params.speed_sigma),
                self.layout_source, self.rng,
                crop_dims=self.params.fov_dims)
        except ValueError:
            raise

    def init_state(self, ego_pose_index: int = None) -> SimState:
        if ego_pose_index is None:
            ego_pose_index = int(self.rng.integers(0, len(self.ego_path)))
        anchor = self.ego_path[ego_pose_index]
        agents = self._spawn(anchor, b_ego=True)
        ego = next((a for a in agents if a.is_ego), None)
        if ego is None:
            raise RuntimeError("ego could not be snapped onto the lane network")
        for offset in (self.params.d_pre, -self.params.d_pre):
            pose = _pose_at_offset(self.ego_path, self._s_path, ego_pose_index, offset)
            if pose is not None:
                agents.extend(self._spawn(pose, b_ego=False))
        return SimState(agents=agents, ego=ego, ego_path=self.ego_path)

    # -- per-step phases --------------------------------------------------

    def ego_pose(self, state: SimState) -> Pose2:
        e = state.ego
        return Pose2(float(e.position[0]), float(e.position[1]), e.yaw)

    def rolling_update(self, state: SimState) -> None:
        params = self.params
        state.delta_d_ego += state.ego.speed * params.dt
        if state.delta_d_ego < params.d_roll:
            return
        ego_pose = self.ego_pose(state)
        vox = self.gmap.voxel_size
        kept = [a for a in state.agents
                if a is state.ego
                or _fov_contains(ego_pose, a.position, params.fov_dims, vox)]
        state.agents = kept
        # nearest recorded pose to the current ego position anchors the respawn
        pts = np.array([[p.x, p.y] for p in self.ego_path])
        anchor_idx = int(np.argmin(np.linalg.norm(pts - state.ego.position, axis=1)))
        spawned_any = False
        for offset in (params.d_pre, -params.d_pre):
            pose = _pose_at_offset(self.ego_path, self._s_path, anchor_idx, offset)
            if pose is None:
                continue
            state.agents.extend(self._spawn(pose, b_ego=False))
            spawned_any = True
        if not spawned_any:
            log.info("recorded ego path exhausted; no respawn anchors")
        state.delta_d_ego = 0.0

    def agent_step(self, state: SimState) -> None:
        params = self.params
        idm = params.idm
        snapshot = [(a, a.position.copy(), a.heading.copy(), a.speed)
                    for a in state.agents]
        for agent, _, _, _ in snapshot:
            if agent.static or not agent.active:
                continue
            others = [a for a, _, _, _ in snapshot if a is not agent]
            leader = select_leader(agent, others, params.d_lat)
            if leader is None:
                a_cmd = idm_accel(agent.speed, idm.v0, 0.0, math.inf, idm)
            else:
                s = float(np.linalg.norm(leader.position - agent.position))
                head_on = float(agent.heading @ leader.heading) < -0.5
                if head_on:
                    dv = agent.speed + leader.speed
                    s -= (agent.asset.length + leader.asset.length) / 2.0
                else:
                    dv = agent.speed - leader.speed
                maybe_lane_change(agent, leader, s, dv, self.network, params)
                a_cmd = idm_accel(agent.speed, idm.v0, dv, s, idm)
            if agent is state.ego and self.ego_speed_hook is not None:
                agent.speed = max(0.0, float(self.ego_speed_hook(state, agent)))
            else:
                agent.speed = max(0.0, agent.speed + a_cmd * params.dt)
            if agent.lc_cooldown > 0:
                agent.lc_cooldown -= 1
            advance_along_route(agent, agent.speed * params.dt)

    def render(self, state: SimState) -> OccupancyGrid:
        ego_pose = self.ego_pose(state)
        background = crop(self.gmap, ego_pose, self.params.fov_dims)
        fg = np.full(background.dims, self.gmap.table.unassigned_id, dtype=np.uint8)
        vox = self.gmap.voxel_size
        for agent in state.agents:
            if not _fov_contains(ego_pose, agent.position, self.params.fov_dims, vox):
                continue
            _stamp_box(fg, background.origin, agent, vox, self.gmap.table.vehicle_id)
        foreground = OccupancyGrid(fg, vox, background.origin, self.gmap.table)
        return overlay(background, foreground)

    def step(self, state: SimState) -> OccupancyGrid:
        self.rolling_update(state)
        self.agent_step(state)
        frame = self.render(state)
        state.step_index += 1
        return frame

    def run(self, ego_pose_index: int = None):
        """Roll the engine for the configured horizon; returns (frames, states
        log). Deterministic for a fixed params.seed."""
        state = self.init_state(ego_pose_index)
        frames = []
        logbook = []
        for _ in range(self.params.horizon):
            frames.append(self.step(state))
            logbook.append(snapshot_state(state))
        return frames, logbook


def _stamp_box(fg: np.ndarray, ego_pose: Pose2, agent: Agent, vox: float,
               vehicle_id: int) -> None:
    """Rasterize an agent's oriented asset box into an ego-frame crop volume."""
    X, Y, Z = fg.shape
    inv = ego_pose.inverse()
    center = inv.transform_point(agent.position) + np.array([X, Y]) * vox / 2.0
    yaw = agent.yaw - ego_pose.yaw
    L, W = agent.asset.length, agent.asset.width
    half_diag = math.hypot(L, W) / 2.0
    x0 = max(int((center[0] - half_diag) / vox) - 1, 0)
    x1 = min(int((center[0] + half_diag) / vox) + 2, X)
    y0 = max(int((center[1] - half_diag) / vox) - 1, 0)
    y1 = min(int((center[1] + half_diag) / vox) + 2, Y)
    if x1 <= x0 or y1 <= y0:
        return
    gx, gy = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1), indexing="ij")
    cx = (gx + 0.5) * vox - center[0]
    cy = (gy + 0.5) * vox - center[1]
    c, s = math.cos(-yaw), math.sin(-yaw)
    lon = c * cx - s * cy
    lat = s * cx + c * cy
    inside = (np.abs(lon) <= L / 2.0) & (np.abs(lat) <= W / 2.0)
    z1 = min(int(math.ceil(agent.asset.height / vox)), Z)
    sub = fg[x0:x1, y0:y1, :z1]
    sub[inside] = vehicle_id
    fg[x0:x1, y0:y1, :z1] = sub


def snapshot_state(state: SimState):
    """JSON-friendly per-step log entry."""
    return {
        "step": state.step_index,
        "ego": {"x": float(state.ego.position[0]), "y": float(state.ego.position[1]),
                "yaw": state.ego.yaw, "speed": state.ego.speed},
        "agents": [
            {"x": float(a.position[0]), "y": float(a.position[1]),
             "yaw": a.yaw, "speed": a.speed, "static": a.static,
             "active": a.active}
            for a in state.agents
        ],
    }


def boxes_overlap(a: Agent, b: Agent) -> bool:
    """Oriented-rectangle intersection test (separating axis) for bumper-gap
    audits."""
    def corners(ag):
        c, s = math.cos(ag.yaw), math.sin(ag.yaw)
        R = np.array([[c, -s], [s, c]])
        L, W = ag.asset.length / 2.0, ag.asset.width / 2.0
        local = np.array([[L, W], [L, -W], [-L, -W], [-L, W]])
        return ag.position + local @ R.T

    ca, cb = corners(a), corners(b)
    for rect in (ca, cb):
        for i in range(4):
            edge = rect[(i + 1) % 4] - rect[i]
            axis = np.array([-edge[1], edge[0]])
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False  # separating axis found
    return True
