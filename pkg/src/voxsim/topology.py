"""Road-skeleton graph extraction and valid-endpoint filtering.

Pipeline: binary road mask -> Zhang-Suen thinning (+ 2x2 corner clearing) ->
8-connected pixel graph -> triangle breaking, spur pruning and junction
contraction -> dual-probe endpoint filtering against the 3D map.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import networkx as nx
import numpy as np

from .occupancy import GlobalMap

log = logging.getLogger(__name__)


@dataclass
class TopologyParams:
    w_lane: float = 3.6        # meters
    tau_prune: float = 5.0     # meters, spur threshold
    tau_obs: int = 20          # obstacle voxels tolerated in the probe box
    probe_length: float = 15.0  # meters, semantic probe box
    probe_width: float = 3.6    # meters

    def __post_init__(self):
        if min(self.w_lane, self.tau_prune, self.probe_length, self.probe_width) <= 0:
            raise ValueError("topology parameters must be positive")
        if self.tau_obs <= 0:
            raise ValueError("tau_obs must be positive")


def _neighbor_stack(img: np.ndarray):
    """P2..P9 neighborhoods (clockwise from north) with zero padding."""
    p = np.pad(img, 1)
    # axis 0 = x, axis 1 = y; "north" = y+1
    p2 = p[1:-1, 2:]
    p3 = p[2:, 2:]
    p4 = p[2:, 1:-1]
    p5 = p[2:, :-2]
    p6 = p[1:-1, :-2]
    p7 = p[:-2, :-2]
    p8 = p[:-2, 1:-1]
    p9 = p[:-2, 2:]
    return [p2, p3, p4, p5, p6, p7, p8, p9]


def zhang_suen_thin(mask: np.ndarray) -> np.ndarray:
    """Iterative Zhang-Suen thinning of a binary image to a 1-pixel skeleton."""
    img = mask.astype(np.uint8).copy()
    changed = True
    while changed:
        changed = False
        for phase in (0, 1):
            nb = _neighbor_stack(img)
            B = sum(n.astype(np.int32) for n in nb)
            ring = nb + [nb[0]]
            A = sum(((ring[i] == 0) & (ring[i + 1] == 1)).astype(np.int32)
                    for i in range(8))
            p2, p4, p6, p8 = nb[0], nb[2], nb[4], nb[6]
            if phase == 0:
                c1 = (p2 * p4 * p6) == 0
                c2 = (p4 * p6 * p8) == 0
            else:
                c1 = (p2 * p4 * p8) == 0
                c2 = (p2 * p6 * p8) == 0
            kill = (img == 1) & (B >= 2) & (B <= 6) & (A == 1) & c1 & c2
            if kill.any():
                img[kill] = 0
                changed = True
    return img.astype(bool)


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """Thin a road mask, then clear the (x+1, y+1) pixel of every fully-filled
    2x2 block so the skeleton is strictly single-pixel under 8-connectivity."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    skel = zhang_suen_thin(mask).astype(np.uint8)
    full = (skel[:-1, :-1] & skel[1:, :-1] & skel[:-1, 1:] & skel[1:, 1:]) == 1
    xs, ys = np.nonzero(full)
    skel[xs + 1, ys + 1] = 0
    return skel.astype(bool)


def build_graph(skeleton: np.ndarray) -> nx.Graph:
    """Pixel graph of the skeleton: a node per pixel, an edge per 8-neighbor
    pair weighted by Euclidean distance, and the longest edge of every
    3-clique removed (ties: lexicographically largest endpoint pair)."""
    g = nx.Graph()
    xs, ys = np.nonzero(np.asarray(skeleton, dtype=bool))
    pixels = set(zip(xs.tolist(), ys.tolist()))
    g.add_nodes_from(pixels)
    for (x, y) in pixels:
        for dx, dy in ((1, 0), (0, 1), (1, 1), (1, -1)):
            v = (x + dx, y + dy)
            if v in pixels:
                g.add_edge((x, y), v, weight=math.hypot(dx, dy))

    for tri in [c for c in nx.enumerate_all_cliques(g) if len(c) == 3]:
        edges = [tuple(sorted((tri[i], tri[j])))
                 for i, j in ((0, 1), (0, 2), (1, 2))]
        edges = [e for e in edges if g.has_edge(*e)]
        if len(edges) < 3:
            continue  # already opened by an earlier removal
        longest = max(edges, key=lambda e: (g.edges[e]["weight"], e))
        g.remove_edge(*longest)
    return g


def _leaf_spur(g: nx.Graph, leaf):
    """Path from a leaf to its nearest junction (deg > 2) and its total weight.
    Returns (path, weight, junction) or None for isolated chains."""
    path = [leaf]
    weight = 0.0
    prev, node = None, leaf
    while True:
        nbrs = [n for n in g.neighbors(node) if n != prev]
        if g.degree(node) > 2:
            return path[:-1], weight, node
        if not nbrs:
            return None
        nxt = nbrs[0]
        weight += g.edges[node, nxt]["weight"]
        prev, node = node, nxt
        path.append(node)
        if weight > 1e6:  # defensive; graphs here are finite
            return None


def _prune_spurs(g: nx.Graph, tau_prune: float) -> bool:
    removed = False
    for leaf in [n for n in g.nodes if g.degree(n) == 1]:
        if leaf not in g or g.degree(leaf) != 1:
            continue
        spur = _leaf_spur(g, leaf)
        if spur is None:
            continue
        path, weight, _junction = spur
        if weight < tau_prune:
            g.remove_nodes_from(path)
            removed = True
    return removed


def _contract_junctions(g: nx.Graph, radius: float) -> bool:
    """Merge the closest junction pair within radius into a centroid node.
    Returns True when a contraction happened."""
    junctions = [n for n in g.nodes if g.degree(n) > 2]
    best = None
    for i, u in enumerate(junctions):
        for v in junctions[i + 1:]:
            d = math.dist(u, v)
            if d < radius and (best is None or d < best[0]):
                best = (d, u, v)
    if best is None:
        return False
    _, u, v = best
    merged = ((u[0] + v[0]) / 2.0, (u[1] + v[1]) / 2.0)
    nbrs = (set(g.neighbors(u)) | set(g.neighbors(v))) - {u, v}
    g.remove_nodes_from([u, v])
    if merged in g:
        merged = (merged[0] + 1e-6, merged[1])
    g.add_node(merged)
    for n in nbrs:
        g.add_edge(merged, n, weight=math.dist(merged, n))
    return True


def clean_graph(g: nx.Graph, tau_prune_px: float, w_lane_px: float) -> nx.Graph:
    """Iterate spur pruning and junction contraction to a joint fixpoint."""
    g = g.copy()
    while True:
        pruned = _prune_spurs(g, tau_prune_px)
        contracted = _contract_junctions(g, 2.0 * w_lane_px)
        if not pruned and not contracted:
            return g


def _outward_direction(g: nx.Graph, leaf, min_len: float = 3.0):
    """Unit direction pointing out of the graph at a leaf, estimated from the
    last segment of at least min_len pixels leading into it."""
    path = [leaf]
    prev, node = None, leaf
    while math.dist(path[0], node) < min_len or node is leaf:
        nbrs = [n for n in g.neighbors(node) if n != prev]
        if not nbrs or g.degree(node) > 2:
            break
        prev, node = node, nbrs[0]
        path.append(node)
    anchor = path[-1]
    if anchor == leaf:
        return None
    d = np.array(leaf, dtype=float) - np.array(anchor, dtype=float)
    n = np.linalg.norm(d)
    return d / n if n > 0 else None


def obstacle_volume(gmap: GlobalMap) -> np.ndarray:
    """Boolean volume of above-ground voxels that are neither road, sidewalk
    nor unassigned."""
    t = gmap.table
    above = gmap.labels[:, :, 1:]
    keep_out = np.isin(above, [t.road_id, t.sidewalk_id, t.unassigned_id])
    free_ids = [e[0] for e in t.entries if e[2] == "free"]
    if free_ids:
        keep_out |= np.isin(above, free_ids)
    return ~keep_out


def _box_obstacle_count(obstacles: np.ndarray, origin_px, direction, length_px, width_px):
    """Count obstacle voxels inside an oriented box extending from origin
    along direction."""
    X, Y = obstacles.shape[0], obstacles.shape[1]
    d = np.asarray(direction, dtype=float)
    n = np.array([-d[1], d[0]])
    o = np.asarray(origin_px, dtype=float)
    # bounding box of the oriented probe
    corners = np.array([
        o + n * width_px / 2, o - n * width_px / 2,
        o + d * length_px + n * width_px / 2, o + d * length_px - n * width_px / 2,
    ])
    x0, y0 = np.maximum(np.floor(corners.min(axis=0)).astype(int), 0)
    x1 = min(int(math.ceil(corners[:, 0].max())) + 1, X)
    y1 = min(int(math.ceil(corners[:, 1].max())) + 1, Y)
    if x1 <= x0 or y1 <= y0:
        return 0
    gx, gy = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1), indexing="ij")
    rel = np.stack([gx - o[0], gy - o[1]], axis=-1)
    lon = rel @ d
    lat = rel @ n
    inside = (lon >= 0) & (lon <= length_px) & (np.abs(lat) <= width_px / 2)
    if not inside.any():
        return 0
    cols = obstacles[gx[inside], gy[inside], :]
    return int(cols.sum())


def filter_endpoints(g: nx.Graph, gmap: GlobalMap, params: TopologyParams):
    """Dual-probe endpoint filtering.

    A leaf survives when the topology probe 1.5*w_lane beyond it leaves the
    road mask and the 15m x 3.6m semantic probe box along its outward
    direction holds fewer than tau_obs obstacle voxels.
    """
    vox = gmap.voxel_size
    road = gmap.labels[:, :, 0] == gmap.table.road_id
    obstacles = obstacle_volume(gmap)
    w_lane_px = params.w_lane / vox
    valid = []
    for leaf in [n for n in g.nodes if g.degree(n) == 1]:
        d = _outward_direction(g, leaf)
        if d is None:
            log.info("skipping isolated leaf %s with no parent segment", leaf)
            continue
        probe = np.array(leaf, dtype=float) + 1.5 * w_lane_px * d
        px, py = int(math.floor(probe[0])), int(math.floor(probe[1]))
        on_road = (0 <= px < road.shape[0] and 0 <= py < road.shape[1]
                   and road[px, py])
        if on_road:
            continue  # internal fragmentation, not a real frontier
        count = _box_obstacle_count(
            obstacles, leaf, d,
            params.probe_length / vox, params.probe_width / vox)
        if count < params.tau_obs:
            valid.append(leaf)
    return valid


def extract_topology(gmap: GlobalMap, params: TopologyParams = None):
    """Full Alg-style chain: mask -> skeleton -> graph -> clean -> endpoints.
    Returns (graph, valid_endpoints); node coordinates are pixels."""
    if params is None:
        params = TopologyParams()
    vox = gmap.voxel_size
    road = gmap.labels[:, :, 0] == gmap.table.road_id
    skel = skeletonize(road)
    g = build_graph(skel)
    g = clean_graph(g, params.tau_prune / vox, params.w_lane / vox)
    valid = filter_endpoints(g, gmap, params)
    return g, valid


def graph_segments(g: nx.Graph):
    """Maximal chains of degree-2 nodes between junction/leaf anchors, as
    ordered pixel paths. Isolated cycles are returned as closed paths."""
    segs = []
    visited_edges = set()

    def edge_key(u, v):
        return (u, v) if u <= v else (v, u)

    anchors = [n for n in g.nodes if g.degree(n) != 2]
    for a in anchors:
        for nbr in g.neighbors(a):
            if edge_key(a, nbr) in visited_edges:
                continue
            path = [a, nbr]
            visited_edges.add(edge_key(a, nbr))
            prev, node = a, nbr
            while g.degree(node) == 2:
                nxt = next(n for n in g.neighbors(node) if n != prev)
                if edge_key(node, nxt) in visited_edges:
                    break
                visited_edges.add(edge_key(node, nxt))
                path.append(nxt)
                prev, node = node, nxt
            segs.append(path)
    # pure cycles with no anchor
    for comp in nx.connected_components(g):
        sub = [n for n in comp]
        if all(g.degree(n) == 2 for n in sub):
            start = sub[0]
            path = [start]
            prev, node = None, start
            while True:
                nxt = next(n for n in g.neighbors(node) if n != prev)
                if nxt == start:
                    path.append(start)
                    break
                path.append(nxt)
                prev, node = node, nxt
            segs.append(path)
    return segs


def save_graph(g: nx.Graph, valid_endpoints, path) -> None:
    nodes = sorted(g.nodes)
    index = {n: i for i, n in enumerate(nodes)}
    obj = {
        "nodes": [{"id": i, "x": n[0], "y": n[1]} for n, i in index.items()],
        "edges": [{"u": index[u], "v": index[v], "weight": d["weight"]}
                  for u, v, d in g.edges(data=True)],
        "valid_endpoints": [index[n] for n in valid_endpoints],
    }
    with open(path, "w") as fh:
        json.dump(obj, fh)


def load_graph(path):
    with open(path) as fh:
        obj = json.load(fh)
    coords = {n["id"]: (n["x"], n["y"]) for n in obj["nodes"]}
    g = nx.Graph()
    g.add_nodes_from(coords.values())
    for e in obj["edges"]:
        g.add_edge(coords[e["u"]], coords[e["v"]], weight=e["weight"])
    valid = [coords[i] for i in obj["valid_endpoints"]]
    return g, valid
