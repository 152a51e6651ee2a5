"""Routing over the vectorized lane network.

Lanes become a weighted point graph: consecutive samples connect along each
lane, and lane endpoints link to nearby samples of other lanes so routes can
flow through junctions. Shortest paths use A* with the straight-line
heuristic, which is admissible because edge weights are Euclidean lengths.
"""

from __future__ import annotations

import heapq
import math

import numpy as np
from scipy.spatial import cKDTree


class RouteNetwork:
    """Bidirectional point graph over lane samples.

    Nodes are integers; ``positions[i]`` is the world-meter coordinate and
    ``lane_of[i]`` the owning lane index.
    """

    def __init__(self, positions, lane_of, adjacency):
        self.positions = np.asarray(positions, dtype=float)
        self.lane_of = list(lane_of)
        self.adjacency = adjacency  # node -> list of (node, weight)
        self._tree = cKDTree(self.positions) if len(self.positions) else None

    def nearest_node(self, point, max_dist=math.inf):
        if self._tree is None:
            return None
        d, i = self._tree.query(np.asarray(point, dtype=float))
        return int(i) if d <= max_dist else None

    def nearest_node_on_other_lane(self, point, exclude_lane, max_dist):
        if self._tree is None:
            return None
        idx = self._tree.query_ball_point(np.asarray(point, dtype=float), max_dist)
        best, best_d = None, math.inf
        for i in idx:
            if self.lane_of[i] == exclude_lane:
                continue
            d = math.dist(self.positions[i], point)
            if d < best_d:
                best, best_d = int(i), d
        return best


def build_route_network(lanes, junction_radius: float = 4.0) -> RouteNetwork:
    """Connect consecutive samples within each lane and stitch lane endpoints
    to nearby samples of other lanes within junction_radius."""
    positions = []
    lane_of = []
    lane_nodes = []
    for li, lane in enumerate(lanes):
        ids = []
        for p in lane.points:
            ids.append(len(positions))
            positions.append(p)
            lane_of.append(li)
        lane_nodes.append(ids)

    adjacency = {i: [] for i in range(len(positions))}

    def connect(a, b):
        w = math.dist(positions[a], positions[b])
        if all(nb != b for nb, _ in adjacency[a]):
            adjacency[a].append((b, w))
            adjacency[b].append((a, w))

    for ids in lane_nodes:
        for a, b in zip(ids, ids[1:]):
            connect(a, b)

    if positions:
        tree = cKDTree(np.asarray(positions))
        for li, ids in enumerate(lane_nodes):
            for end in (ids[0], ids[-1]):
                for j in tree.query_ball_point(positions[end], junction_radius):
                    if lane_of[j] != li:
                        connect(end, int(j))
    return RouteNetwork(positions, lane_of, adjacency)


def astar(adjacency, positions, start: int, goal: int):
    """A* shortest path by total edge weight; returns (node list, cost) or None."""
    positions = np.asarray(positions, dtype=float)

    def h(n):
        return math.dist(positions[n], positions[goal])

    open_heap = [(h(start), 0.0, start)]
    g_cost = {start: 0.0}
    parent = {start: None}
    closed = set()
    while open_heap:
        f, g, node = heapq.heappop(open_heap)
        if node in closed:
            continue
        if node == goal:
            path = []
            while node is not None:
                path.append(node)
                node = parent[node]
            return path[::-1], g
        closed.add(node)
        for nbr, w in adjacency.get(node, ()):
            ng = g + w
            if ng < g_cost.get(nbr, math.inf):
                g_cost[nbr] = ng
                parent[nbr] = node
                heapq.heappush(open_heap, (ng + h(nbr), ng, nbr))
    return None


def route_points(network: RouteNetwork, start_point, goal_point,
                 snap_dist: float = 5.0):
    """World-meter polyline of the shortest route between two points snapped
    onto the network; None when either snap or the search fails."""
    s = network.nearest_node(start_point, snap_dist)
    t = network.nearest_node(goal_point, math.inf)
    if s is None or t is None:
        return None
    found = astar(network.adjacency, network.positions, s, t)
    if found is None:
        return None
    path, _ = found
    return network.positions[path]
