"""Semantic occupancy volumes, the category table, and bit-exact OCCG I/O."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose2

ROLES = ("road", "sidewalk", "vehicle", "ground", "obstacle", "free", "other")
GROUND_ROLES = ("road", "sidewalk", "ground")


@dataclass(frozen=True)
class SemanticTable:
    """Ordered category table: (id, name, role) triples plus the unassigned sentinel."""

    entries: tuple  # of (id, name, role)
    unassigned_id: int = 0

    def __post_init__(self):
        ids = [e[0] for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate category ids")
        if self.unassigned_id in ids:
            raise ValueError("unassigned_id reused by a category")
        for role in ("road", "sidewalk", "vehicle"):
            if sum(1 for e in self.entries if e[2] == role) != 1:
                raise ValueError(f"exactly one {role} category required")
        for _, _, role in self.entries:
            if role not in ROLES:
                raise ValueError(f"unknown role {role!r}")
        if not self.ground_ids:
            raise ValueError("ground-role category set must be nonempty")

    def _id_for_role(self, role: str) -> int:
        return next(e[0] for e in self.entries if e[2] == role)

    @property
    def road_id(self) -> int:
        return self._id_for_role("road")

    @property
    def sidewalk_id(self) -> int:
        return self._id_for_role("sidewalk")

    @property
    def vehicle_id(self) -> int:
        return self._id_for_role("vehicle")

    @property
    def ground_ids(self) -> tuple:
        return tuple(e[0] for e in self.entries if e[2] in GROUND_ROLES)

    @property
    def ids(self) -> tuple:
        return tuple(e[0] for e in self.entries)

    def to_json(self):
        return {
            "entries": [{"id": i, "name": n, "role": r} for i, n, r in self.entries],
            "unassigned_id": self.unassigned_id,
        }

    @classmethod
    def from_json(cls, obj) -> "SemanticTable":
        entries = tuple((e["id"], e["name"], e["role"]) for e in obj["entries"])
        return cls(entries=entries, unassigned_id=obj["unassigned_id"])

    @classmethod
    def load(cls, path) -> "SemanticTable":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def default_table() -> SemanticTable:
    """Minimal six-category table used by the test worlds and as CLI default."""
    return SemanticTable(
        entries=(
            (1, "road", "road"),
            (2, "sidewalk", "sidewalk"),
            (3, "vehicle", "vehicle"),
            (4, "terrain", "ground"),
            (5, "obstacle", "obstacle"),
            (6, "free", "free"),
        ),
        unassigned_id=0,
    )


DEFAULT_VOXEL_SIZE = 0.4
DEFAULT_CROP_DIMS = (200, 200, 16)


@dataclass
class OccupancyGrid:
    """Dense semantic label volume, x-major (X, Y, Z), one byte per voxel."""

    labels: np.ndarray
    voxel_size: float = DEFAULT_VOXEL_SIZE
    origin: Pose2 = field(default_factory=Pose2)
    table: SemanticTable = field(default_factory=default_table)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 3:
            raise ValueError("labels must be a 3D volume")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")

    @property
    def dims(self):
        return self.labels.shape

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.labels.copy(), self.voxel_size, self.origin, self.table)


class GlobalMap(OccupancyGrid):
    """World-anchored fused map; origin is the world position of voxel (0, 0, 0)."""

    @property
    def extent(self):
        """((xmin, ymin), (xmax, ymax)) of the map footprint in world meters."""
        lo = np.array([self.origin.x, self.origin.y])
        hi = lo + np.array(self.dims[:2]) * self.voxel_size
        return lo, hi

    def world_to_index(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return np.floor((pts - [self.origin.x, self.origin.y]) / self.voxel_size).astype(np.int64)


def crop(gmap: GlobalMap, pose: Pose2, out_dims=DEFAULT_CROP_DIMS) -> OccupancyGrid:
    """Ego-centered, yaw-aligned nearest-neighbor crop of a global map.

    Voxels sampled outside the map extent come back as the unassigned id.
    """
    X, Y, Z = out_dims
    if X <= 0 or Y <= 0 or Z <= 0:
        raise ValueError("crop dims must be positive")
    vox = gmap.voxel_size
    # Crop cell centers in the ego frame, ego at the crop center.
    xs = (np.arange(X) + 0.5 - X / 2.0) * vox
    ys = (np.arange(Y) + 0.5 - Y / 2.0) * vox
    lx, ly = np.meshgrid(xs, ys, indexing="ij")
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    wx = pose.x + c * lx - s * ly
    wy = pose.y + s * lx + c * ly
    ix = np.floor((wx - gmap.origin.x) / vox).astype(np.int64)
    iy = np.floor((wy - gmap.origin.y) / vox).astype(np.int64)
    inside = (ix >= 0) & (ix < gmap.dims[0]) & (iy >= 0) & (iy < gmap.dims[1])
    out = np.full((X, Y, Z), gmap.table.unassigned_id, dtype=np.uint8)
    zcount = min(Z, gmap.dims[2])
    out[inside, :zcount] = gmap.labels[ix[inside], iy[inside], :zcount]
    return OccupancyGrid(out, vox, pose, gmap.table)


def overlay(background: OccupancyGrid, foreground: OccupancyGrid) -> OccupancyGrid:
    """Foreground label wins wherever it is assigned; background elsewhere."""
    if background.dims != foreground.dims or background.voxel_size != foreground.voxel_size:
        raise ValueError("overlay requires identical dims and voxel size")
    out = background.labels.copy()
    sel = foreground.labels != foreground.table.unassigned_id
    out[sel] = foreground.labels[sel]
    return OccupancyGrid(out, background.voxel_size, background.origin, background.table)


# --- OCCG v1 container ------------------------------------------------------
#
# Layout: 12-byte magic, u32 version, u64 JSON header length, JSON header
# (dims, voxel_size, origin, semantic table, global flag), raw label payload
# of exactly X*Y*Z bytes.

MAGIC = b"VOXSEMOCCGRID"[:12]
VERSION = 1


class GridFormatError(ValueError):
    """Malformed OCCG container; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def write_grid(grid: OccupancyGrid, path) -> None:
    header = {
        "dims": list(grid.dims),
        "voxel_size": grid.voxel_size,
        "origin": {"x": grid.origin.x, "y": grid.origin.y, "yaw": grid.origin.yaw},
        "table": grid.table.to_json(),
        "global": isinstance(grid, GlobalMap),
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(grid.labels, dtype=np.uint8).tobytes())


def read_grid(path) -> OccupancyGrid:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 24:
        raise GridFormatError("file shorter than fixed header", len(data))
    if data[:12] != MAGIC:
        raise GridFormatError("magic mismatch", 0)
    (version,) = struct.unpack_from("<I", data, 12)
    if version != VERSION:
        raise GridFormatError(f"unknown version {version}", 12)
    (hlen,) = struct.unpack_from("<Q", data, 16)
    if len(data) < 24 + hlen:
        raise GridFormatError("truncated JSON header", 24)
    header = json.loads(data[24:24 + hlen])
    X, Y, Z = header["dims"]
    expected = X * Y * Z
    payload = data[24 + hlen:]
    if len(payload) != expected:
        raise GridFormatError(
            f"payload length {len(payload)} != expected {expected}", 24 + hlen)
    labels = np.frombuffer(payload, dtype=np.uint8).reshape(X, Y, Z).copy()
    origin = Pose2(**header["origin"])
    table = SemanticTable.from_json(header["table"])
    cls = GlobalMap if header.get("global") else OccupancyGrid
    return cls(labels, header["voxel_size"], origin, table)
