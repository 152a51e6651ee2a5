import numpy as np
import pytest

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

from voxsim.geometry import Pose2
from voxsim.occupancy import GlobalMap, default_table


@pytest.fixture
def table():
    return default_table()


def make_map(plane, table, voxel_size=0.4, z_dim=8, free_above=True):
    """Build a GlobalMap from a 2D label plane: plane at z=0, free above."""
    plane = np.asarray(plane, dtype=np.uint8)
    labels = np.zeros(plane.shape + (z_dim,), dtype=np.uint8)
    labels[:, :, 0] = plane
    if free_above:
        free_id = next(i for i, _, r in table.entries if r == "free")
        labels[:, :, 1:] = free_id
    return GlobalMap(labels, voxel_size, Pose2(0.0, 0.0, 0.0), table)


@pytest.fixture
def straight_road_map(table):
    """50 m x 20 m world, 9.6 m road strip along x at y center."""
    n, m = 125, 50  # 0.4 m voxels
    plane = np.full((n, m), 4, dtype=np.uint8)  # terrain
    yc = m // 2
    half = 12  # 4.8 m
    plane[:, yc - half:yc + half] = table.road_id
    return make_map(plane, table)
