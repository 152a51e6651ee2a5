"""Two-pass keyframe occupancy fusion.

Phase 1 selects spatially separated keyframes, phase 2 writes them first-wins
into a fresh world map and sinks columns to the ground plane, phase 3 inpaints
the remaining gaps with per-category votes from the non-keyframes, and phase 4
cleans the result morphologically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import Pose2
from .occupancy import GlobalMap


@dataclass
class FusionParams:
    d_max: float = 10.0        # keyframe spacing, meters
    tau_vote: int = 3          # minimum vote count for inpainting
    min_area: float = 2.0      # road components below this (m^2) are dropped
    margin: float = 2.0        # world-map padding around frame footprints, meters

    def __post_init__(self):
        if self.d_max <= 0 or self.tau_vote < 1 or self.min_area < 0:
            raise ValueError("invalid fusion parameters")


def select_keyframes(poses, d_max: float):
    """Greedy spatial subsampling: keep a pose once it moves more than d_max
    from the last kept one. The first pose is always kept."""
    if len(poses) < 1:
        raise ValueError("need at least one pose")
    keys = [0]
    last = np.array([poses[0].x, poses[0].y])
    for i, p in enumerate(poses[1:], start=1):
        here = np.array([p.x, p.y])
        if np.linalg.norm(here - last) > d_max:
            keys.append(i)
            last = here
    return keys


def _frame_footprint(pose: Pose2, dims, vox: float):
    """World-frame axis-aligned bounding box of an ego-centered crop."""
    X, Y = dims[0], dims[1]
    corners_local = np.array([
        [-X / 2.0, -Y / 2.0], [X / 2.0, -Y / 2.0],
        [-X / 2.0, Y / 2.0], [X / 2.0, Y / 2.0],
    ]) * vox
    corners = pose.transform_point(corners_local)
    return corners.min(axis=0), corners.max(axis=0)


def _map_extent(poses, dims, vox: float, margin: float):
    lo = np.array([np.inf, np.inf])
    hi = np.array([-np.inf, -np.inf])
    for p in poses:
        flo, fhi = _frame_footprint(p, dims, vox)
        lo = np.minimum(lo, flo)
        hi = np.maximum(hi, fhi)
    lo -= margin
    hi += margin
    # snap the origin to the voxel lattice so axis-aligned warps stay exact
    lo = np.floor(lo / vox) * vox
    nx = int(math.ceil((hi[0] - lo[0]) / vox))
    ny = int(math.ceil((hi[1] - lo[1]) / vox))
    return lo, (nx, ny)


def _frame_to_map_indices(gmap: GlobalMap, pose: Pose2, dims):
    """For every global cell inside the frame's footprint: (gx, gy, fx, fy).

    Gather formulation: global cell centers are pulled back through the ego
    pose into frame indices, the exact inverse of the crop sampling.
    """
    vox = gmap.voxel_size
    X, Y = dims[0], dims[1]
    lo, hi = _frame_footprint(pose, dims, vox)
    g0 = np.maximum(gmap.world_to_index(lo), 0)
    g1 = np.minimum(gmap.world_to_index(hi) + 1, np.array(gmap.dims[:2]))
    if np.any(g1 <= g0):
        return None
    gx = np.arange(g0[0], g1[0])
    gy = np.arange(g0[1], g1[1])
    GX, GY = np.meshgrid(gx, gy, indexing="ij")
    wx = gmap.origin.x + (GX + 0.5) * vox
    wy = gmap.origin.y + (GY + 0.5) * vox
    inv = pose.inverse()
    c, s = math.cos(inv.yaw), math.sin(inv.yaw)
    lx = inv.x + c * wx - s * wy
    ly = inv.y + s * wx + c * wy
    fx = np.floor(lx / vox + X / 2.0).astype(np.int64)
    fy = np.floor(ly / vox + Y / 2.0).astype(np.int64)
    ok = (fx >= 0) & (fx < X) & (fy >= 0) & (fy < Y)
    return GX[ok], GY[ok], fx[ok], fy[ok]


def fuse_keyframes(frames, poses, keys, table, voxel_size=None, margin: float = 2.0) -> GlobalMap:
    """Pass 1: warp each keyframe into the world map, writing only voxels that
    are still unassigned (first-wins), then sink every column so its lowest
    ground-role voxel sits at z=0 and mode-fill unassigned z=0 cells."""
    if len(frames) != len(poses):
        raise ValueError("frames and poses must pair up")
    if not keys:
        raise ValueError("empty keyframe set")
    vox = voxel_size if voxel_size is not None else frames[keys[0]].voxel_size
    dims = frames[keys[0]].dims
    lo, (nx, ny) = _map_extent([poses[k] for k in keys], dims, vox, margin)
    labels = np.full((nx, ny, dims[2]), table.unassigned_id, dtype=np.uint8)
    gmap = GlobalMap(labels, vox, Pose2(lo[0], lo[1], 0.0), table)

    for k in keys:
        hit = _frame_to_map_indices(gmap, poses[k], dims)
        if hit is None:
            continue
        gx, gy, fx, fy = hit
        src = frames[k].labels[fx, fy, :]          # (n, Z)
        dst = gmap.labels[gx, gy, :]
        unset = dst == table.unassigned_id
        dst[unset] = src[unset]
        gmap.labels[gx, gy, :] = dst

    _sink_columns(gmap, table)
    _mode_fill_ground(gmap, table)
    return gmap


def _sink_columns(gmap: GlobalMap, table) -> None:
    """Shift each (x, y) column down so its lowest ground-role voxel is at z=0."""
    labels = gmap.labels
    ground = np.isin(labels, table.ground_ids)
    has_ground = ground.any(axis=2)
    dz = np.where(has_ground, ground.argmax(axis=2), 0)
    Z = labels.shape[2]
    shift = dz[:, :, None]
    zidx = np.arange(Z)[None, None, :] + shift
    src_valid = zidx < Z
    zidx = np.minimum(zidx, Z - 1)
    xi = np.arange(labels.shape[0])[:, None, None]
    yi = np.arange(labels.shape[1])[None, :, None]
    sunk = np.where(src_valid, labels[xi, yi, zidx], table.unassigned_id)
    gmap.labels = sunk.astype(np.uint8)


def _mode_fill_ground(gmap: GlobalMap, table) -> None:
    """Fill unassigned z=0 cells with the mode of their assigned 3x3 neighbors;
    ties break toward the lowest category id."""
    plane = gmap.labels[:, :, 0]
    holes = plane == table.unassigned_id
    if not holes.any():
        return
    best_count = np.zeros(plane.shape, dtype=np.int32)
    best_label = np.full(plane.shape, table.unassigned_id, dtype=np.uint8)
    kernel = np.ones((3, 3), dtype=np.int32)
    for cid in sorted(table.ids):
        count = ndimage.convolve((plane == cid).astype(np.int32), kernel,
                                 mode="constant", cval=0)
        better = count > best_count  # strict: earlier (lower) id wins ties
        best_count = np.where(better, count, best_count)
        best_label = np.where(better, np.uint8(cid), best_label)
    fill = holes & (best_count > 0)
    plane[fill] = best_label[fill]


def vote_inpaint(gmap: GlobalMap, frames, poses, non_keys, tau_vote: int) -> GlobalMap:
    """Pass 2: per-category indicator votes from warped non-keyframes fill the
    still-unassigned voxels; argmax wins if it reaches tau_vote, ties break
    toward the lowest category id. Pass-1 voxels are never modified."""
    table = gmap.table
    out = gmap.labels.copy()
    unassigned = out == table.unassigned_id
    if not unassigned.any() or not non_keys:
        return GlobalMap(out, gmap.voxel_size, gmap.origin, table)

    cids = sorted(table.ids)
    cindex = {c: i for i, c in enumerate(cids)}
    Z = out.shape[2]
    votes = np.zeros(out.shape + (len(cids),), dtype=np.uint16)

    dims = frames[non_keys[0]].dims
    for t in non_keys:
        hit = _frame_to_map_indices(gmap, poses[t], dims)
        if hit is None:
            continue
        gx, gy, fx, fy = hit
        src = frames[t].labels[fx, fy, :]  # (n, Z)
        for cid in cids:
            sel = src == cid
            if not sel.any():
                continue
            n_idx, z_idx = np.nonzero(sel)
            np.add.at(votes, (gx[n_idx], gy[n_idx], z_idx, cindex[cid]), 1)

    max_votes = votes.max(axis=3)
    winner = np.argmax(votes, axis=3)  # first (lowest-id) argmax on ties
    assign = unassigned & (max_votes >= tau_vote)
    cid_arr = np.array(cids, dtype=np.uint8)
    out[assign] = cid_arr[winner[assign]]
    return GlobalMap(out, gmap.voxel_size, gmap.origin, table)


def refine_morphology(gmap: GlobalMap, params: FusionParams) -> GlobalMap:
    """Pass 3: binary closing (3x3) on the sidewalk class at z=0 and removal of
    road connected components smaller than min_area."""
    table = gmap.table
    out = gmap.labels.copy()
    plane = out[:, :, 0]

    sidewalk = plane == table.sidewalk_id
    closed = ndimage.binary_closing(sidewalk, structure=np.ones((3, 3), dtype=bool))
    grown = closed & ~sidewalk
    # closing only ever adds pixels; fill them in where nothing else is assigned
    plane[grown & (plane == table.unassigned_id)] = table.sidewalk_id

    road = plane == table.road_id
    lab, n = ndimage.label(road, structure=np.ones((3, 3), dtype=bool))
    if n:
        areas = ndimage.sum_labels(np.ones_like(lab), lab, index=np.arange(1, n + 1))
        cell_area = gmap.voxel_size ** 2
        small = np.nonzero(areas * cell_area < params.min_area)[0] + 1
        if small.size:
            kill = np.isin(lab, small)
            plane[kill] = table.unassigned_id
    return GlobalMap(out, gmap.voxel_size, gmap.origin, table)


def fuse_sequence(frames, poses, params: FusionParams, table=None) -> GlobalMap:
    """Full Phase 1-4 pipeline over an ego-centric frame sequence."""
    if table is None:
        table = frames[0].table
    keys = select_keyframes(poses, params.d_max)
    gmap = fuse_keyframes(frames, poses, keys, table, margin=params.margin)
    non_keys = [i for i in range(len(frames)) if i not in set(keys)]
    gmap = vote_inpaint(gmap, frames, poses, non_keys, params.tau_vote)
    return refine_morphology(gmap, params)
