"""Vectorized lane extraction from cleaned skeleton segments.

Phase 1 smooths each long-enough segment with a cubic B-spline, estimates the
local road width, and offsets parallel candidates along the normals. Phase 2
cuts candidates where they run within epsilon of another lane, keeps the
longest surviving run, re-splines it, and drops anything shorter than five
samples.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import interpolate, ndimage
from scipy.spatial import cKDTree


@dataclass
class LaneParams:
    w_lane: float = 3.6
    epsilon: float = 0.9       # conflict distance, meters
    ds_step: float = 0.5       # resampling step, meters
    min_segment_pts: int = 10
    min_lane_samples: int = 5

    def __post_init__(self):
        if min(self.w_lane, self.epsilon, self.ds_step) <= 0:
            raise ValueError("lane parameters must be positive")
        if self.epsilon >= self.w_lane:
            raise ValueError("epsilon must be smaller than the lane width")


@dataclass
class Lane:
    points: np.ndarray                 # (N, 2) world meters
    source_segment: int = 0
    offset_index: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


def _arc_resample(points: np.ndarray, ds: float) -> np.ndarray:
    """Resample a polyline at (approximately) uniform arc-length spacing,
    keeping both endpoints."""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if total <= 0:
        return points[:1].copy()
    n = max(int(round(total / ds)), 1)
    targets = np.linspace(0.0, total, n + 1)
    x = np.interp(targets, s, points[:, 0])
    y = np.interp(targets, s, points[:, 1])
    return np.stack([x, y], axis=1)


def fit_centerline(segment, ds_step: float, smooth: float = None) -> np.ndarray:
    """Least-squares cubic B-spline fit of a pixel path, resampled at ds_step.

    Endpoints are pinned to the input endpoints after smoothing so segment
    junctions stay coherent across the graph.
    """
    pts = np.asarray(segment, dtype=float)
    if len(pts) < 10:
        raise ValueError("centerline fit needs at least 10 points")
    # collapse duplicate consecutive points, splprep rejects them
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.linalg.norm(np.diff(pts, axis=0), axis=1) > 1e-12
    pts = pts[keep]
    if smooth is None:
        smooth = len(pts) * 0.25  # absorbs ~half-cell rasterization noise
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    u = np.concatenate([[0.0], np.cumsum(seg)])
    if u[-1] <= 0:
        return pts[:1].copy()
    u /= u[-1]
    try:
        (tck, _) = interpolate.splprep([pts[:, 0], pts[:, 1]], u=u, k=3, s=smooth)
    except Exception:
        (tck, _) = interpolate.splprep([pts[:, 0], pts[:, 1]], u=u, k=3, s=0)
    dense = np.linspace(0.0, 1.0, max(len(pts) * 4, 64))
    x, y = interpolate.splev(dense, tck)
    curve = np.stack([x, y], axis=1)
    curve[0] = pts[0]
    curve[-1] = pts[-1]
    return _arc_resample(curve, ds_step)


def normal_vectors(points: np.ndarray) -> np.ndarray:
    """Unit left normals via central differences (one-sided at the ends)."""
    t = np.gradient(points, axis=0)
    norms = np.linalg.norm(t, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    t = t / norms
    return np.stack([-t[:, 1], t[:, 0]], axis=1)


def estimate_width(center_px: np.ndarray, road_mask: np.ndarray, voxel_size: float) -> float:
    """Road width in meters at a centerline: twice the median distance-transform
    value sampled along it."""
    dist = ndimage.distance_transform_edt(road_mask) * voxel_size
    idx = np.floor(center_px).astype(int)
    idx[:, 0] = np.clip(idx[:, 0], 0, road_mask.shape[0] - 1)
    idx[:, 1] = np.clip(idx[:, 1], 0, road_mask.shape[1] - 1)
    return 2.0 * float(np.median(dist[idx[:, 0], idx[:, 1]]))


def _on_mask(points_m: np.ndarray, mask: np.ndarray, voxel_size: float, origin=(0.0, 0.0)) -> np.ndarray:
    idx = np.floor((points_m - np.asarray(origin)) / voxel_size).astype(int)
    ok = ((idx[:, 0] >= 0) & (idx[:, 0] < mask.shape[0])
          & (idx[:, 1] >= 0) & (idx[:, 1] < mask.shape[1]))
    out = np.zeros(len(points_m), dtype=bool)
    out[ok] = mask[idx[ok, 0], idx[ok, 1]]
    return out


def offset_lanes(center: np.ndarray, seg_width: float, params: LaneParams,
                 drivable: np.ndarray, voxel_size: float, origin=(0.0, 0.0),
                 source_segment: int = 0):
    """Parallel lane candidates: n = floor(seg_width / w_lane) - 1 offsets at
    (i - (n-1)/2) * w_lane along the centerline normals. A candidate is kept
    only when its interior stays on the drivable mask; n <= 0 degrades to the
    centerline alone."""
    n = int(math.floor(seg_width / params.w_lane + 1e-9)) - 1
    if n <= 0:
        return [Lane(center.copy(), source_segment, 0)]
    normals = normal_vectors(center)
    lanes = []
    for i in range(n):
        off = (i - (n - 1) / 2.0) * params.w_lane
        pts = center + off * normals
        interior = pts[1:-1] if len(pts) > 2 else pts
        if _on_mask(interior, drivable, voxel_size, origin).all():
            lanes.append(Lane(pts, source_segment, i))
    return lanes


def _longest_run(mask: np.ndarray):
    """Start/stop (inclusive/exclusive) of the longest True run."""
    best = (0, 0)
    start = None
    for i, v in enumerate(mask):
        if v and start is None:
            start = i
        if (not v or i == len(mask) - 1) and start is not None:
            stop = i + 1 if v else i
            if stop - start > best[1] - best[0]:
                best = (start, stop)
            start = None
    return best


def resolve_overlaps(candidates, params: LaneParams):
    """Cut every lane at samples lying within epsilon of any other lane, keep
    its longest contiguous run, re-spline it, and drop short remainders."""
    if not candidates:
        return []
    trees = [cKDTree(l.points) for l in candidates]
    final = []
    for i, lane in enumerate(candidates):
        conflict = np.zeros(len(lane.points), dtype=bool)
        for j, tree in enumerate(trees):
            if j == i:
                continue
            d, _ = tree.query(lane.points, distance_upper_bound=params.epsilon)
            conflict |= np.isfinite(d)
        start, stop = _longest_run(~conflict)
        kept = lane.points[start:stop]
        if len(kept) < params.min_lane_samples:
            continue
        if len(kept) >= 10:
            kept = fit_centerline(kept, params.ds_step, smooth=len(kept) * 0.01)
        if len(kept) < params.min_lane_samples:
            continue
        final.append(Lane(kept, lane.source_segment, lane.offset_index))
    return final


def extract_lanes(gmap, graph, params: LaneParams = None):
    """Alg-style two-phase extraction over all graph segments of a fused map.
    Lane points come out in world meters."""
    from .topology import graph_segments

    if params is None:
        params = LaneParams()
    vox = gmap.voxel_size
    road = gmap.labels[:, :, 0] == gmap.table.road_id
    origin = (gmap.origin.x, gmap.origin.y)
    dist = ndimage.distance_transform_edt(road) * vox

    candidates = []
    for seg_id, seg in enumerate(graph_segments(graph)):
        if len(seg) < params.min_segment_pts:
            continue
        seg_px = np.asarray(seg, dtype=float)
        center_px = fit_centerline(seg_px, params.ds_step / vox)
        idx = np.clip(np.floor(center_px).astype(int),
                      0, [road.shape[0] - 1, road.shape[1] - 1])
        seg_width = 2.0 * float(np.median(dist[idx[:, 0], idx[:, 1]]))
        center_m = (center_px + 0.5) * vox + np.asarray(origin)
        cands = offset_lanes(center_m, seg_width, params, road, vox, origin,
                             source_segment=seg_id)
        candidates.extend(cands)
    return resolve_overlaps(candidates, params)


def save_lanes(lanes, path) -> None:
    obj = [{"id": i, "points": l.points.tolist(), "offset_index": l.offset_index,
            "source_segment": l.source_segment} for i, l in enumerate(lanes)]
    with open(path, "w") as fh:
        json.dump(obj, fh)


def load_lanes(path):
    with open(path) as fh:
        obj = json.load(fh)
    return [Lane(np.asarray(l["points"]), l["source_segment"], l["offset_index"])
            for l in obj]
