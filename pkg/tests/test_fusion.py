import numpy as np
import pytest

from voxsim.fusion import (FusionParams, fuse_keyframes, fuse_sequence,
                           refine_morphology, select_keyframes, vote_inpaint)
from voxsim.geometry import Pose2
from voxsim.occupancy import GlobalMap
from voxsim.synthworld import (WorldSpec, generate_world, sample_frames,
                               straight_trajectory)

from conftest import make_map


class TestSelectKeyframes:
    def test_hand_trace(self):
        # distances from pose 0: 0, 4, 9, 12, 14, 26
        xs = [0, 4, 9, 12, 14, 26]
        poses = [Pose2(float(x), 0, 0) for x in xs]
        # greedy: keep 0; 4 (d=4) no; 9 no; 12 (d=12>10) keep; 14 (d=2) no;
        # 26 (d=14>10) keep
        assert select_keyframes(poses, 10.0) == [0, 3, 5]

    def test_first_always_kept(self):
        assert select_keyframes([Pose2()], 10.0) == [0]

    def test_boundary_not_strictly_greater(self):
        poses = [Pose2(0, 0, 0), Pose2(10.0, 0, 0), Pose2(10.1, 0, 0)]
        assert select_keyframes(poses, 10.0) == [0, 2]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            select_keyframes([], 10.0)


class TestFirstWins:
    def test_earlier_keyframe_wins_conflicts(self, table):
        # two identical-pose frames with different labels: first keyframe wins
        f1 = make_map(np.full((20, 20), table.road_id, dtype=np.uint8), table,
                      z_dim=4)
        f2 = make_map(np.full((20, 20), table.sidewalk_id, dtype=np.uint8),
                      table, z_dim=4)
        pose = Pose2(4.0, 4.0, 0.0)
        gmap = fuse_keyframes([f1, f2], [pose, pose], [0, 1], table)
        assigned = gmap.labels[:, :, 0]
        core = assigned[assigned != table.unassigned_id]
        assert (core == table.road_id).all()


class TestColumnSinking:
    def test_elevated_ground_sinks_to_zero(self, table):
        labels = np.zeros((4, 4, 8), dtype=np.uint8)
        labels[:, :, 2] = table.road_id       # ground floating at z=2
        labels[:, :, 3] = 6                   # free above
        gmap = GlobalMap(labels.copy(), 0.4, Pose2(), table)
        from voxsim.fusion import _sink_columns
        _sink_columns(gmap, table)
        assert (gmap.labels[:, :, 0] == table.road_id).all()
        assert (gmap.labels[:, :, 1] == 6).all()
        # vacated top layers become unassigned
        assert (gmap.labels[:, :, 6:] == table.unassigned_id).all()

    def test_groundless_column_untouched(self, table):
        labels = np.zeros((2, 2, 4), dtype=np.uint8)
        labels[:, :, 3] = 5  # obstacle only
        gmap = GlobalMap(labels.copy(), 0.4, Pose2(), table)
        from voxsim.fusion import _sink_columns
        _sink_columns(gmap, table)
        assert np.array_equal(gmap.labels, labels)


class TestModeFill:
    def test_majority_neighbor_fills_hole(self, table):
        plane = np.full((5, 5), table.road_id, dtype=np.uint8)
        plane[2, 2] = table.unassigned_id
        gmap = make_map(plane, table, z_dim=2, free_above=False)
        from voxsim.fusion import _mode_fill_ground
        _mode_fill_ground(gmap, table)
        assert gmap.labels[2, 2, 0] == table.road_id

    def test_tie_breaks_to_lowest_id(self, table):
        # 4 road vs 4 sidewalk neighbors around the hole: road (id 1) wins
        plane = np.zeros((3, 3), dtype=np.uint8)
        plane[0, :] = table.road_id
        plane[2, :] = table.sidewalk_id
        plane[1, 0] = table.road_id
        plane[1, 2] = table.sidewalk_id
        gmap = make_map(plane, table, z_dim=2, free_above=False)
        from voxsim.fusion import _mode_fill_ground
        _mode_fill_ground(gmap, table)
        assert gmap.labels[1, 1, 0] == table.road_id

    def test_isolated_hole_left_unassigned(self, table):
        plane = np.zeros((5, 5), dtype=np.uint8)
        gmap = make_map(plane, table, z_dim=2, free_above=False)
        from voxsim.fusion import _mode_fill_ground
        _mode_fill_ground(gmap, table)
        assert (gmap.labels[:, :, 0] == table.unassigned_id).all()


class TestVoteInpaint:
    def _map_and_frames(self, table, votes_per_label):
        """Unassigned 8x8 map plus stacked identical frames at the map pose."""
        gmap = GlobalMap(np.zeros((8, 8, 4), dtype=np.uint8), 0.4,
                         Pose2(0, 0, 0), table)
        frames, poses = [], []
        pose = Pose2(8 * 0.4 / 2, 8 * 0.4 / 2, 0.0)
        for label, count in votes_per_label:
            for _ in range(count):
                f = make_map(np.full((8, 8), label, dtype=np.uint8), table,
                             z_dim=4, free_above=False)
                frames.append(f)
                poses.append(pose)
        return gmap, frames, poses

    def test_threshold_respected(self, table):
        gmap, frames, poses = self._map_and_frames(table, [(table.road_id, 2)])
        out = vote_inpaint(gmap, frames, poses, list(range(len(frames))), 3)
        assert (out.labels[:, :, 0] == table.unassigned_id).all()
        out = vote_inpaint(gmap, frames, poses, list(range(len(frames))), 2)
        assert (out.labels[:, :, 0] == table.road_id).all()

    def test_argmax_tie_lowest_id(self, table):
        gmap, frames, poses = self._map_and_frames(
            table, [(table.road_id, 3), (table.sidewalk_id, 3)])
        out = vote_inpaint(gmap, frames, poses, list(range(len(frames))), 3)
        assert (out.labels[:, :, 0] == table.road_id).all()

    def test_pass1_voxels_never_modified(self, table):
        gmap, frames, poses = self._map_and_frames(table, [(table.sidewalk_id, 5)])
        gmap.labels[3, 3, 0] = table.road_id
        out = vote_inpaint(gmap, frames, poses, list(range(len(frames))), 3)
        assert out.labels[3, 3, 0] == table.road_id


class TestMorphology:
    def test_small_road_blob_removed(self, table):
        plane = np.full((30, 30), 4, dtype=np.uint8)
        plane[5, 5] = table.road_id  # 0.16 m^2 at 0.4 m voxels
        gmap = make_map(plane, table, z_dim=2, free_above=False)
        out = refine_morphology(gmap, FusionParams())
        assert out.labels[5, 5, 0] == table.unassigned_id

    def test_large_road_component_retained(self, table):
        plane = np.full((30, 30), 4, dtype=np.uint8)
        plane[10:20, 10:20] = table.road_id  # 16 m^2
        gmap = make_map(plane, table, z_dim=2, free_above=False)
        out = refine_morphology(gmap, FusionParams())
        assert (out.labels[10:20, 10:20, 0] == table.road_id).all()

    def test_sidewalk_closing_fills_unassigned_gap(self, table):
        plane = np.zeros((20, 20), dtype=np.uint8)
        plane[5:15, 4:6] = table.sidewalk_id
        plane[10, 4:6] = table.unassigned_id  # one-row nick
        gmap = make_map(plane, table, z_dim=2, free_above=False)
        out = refine_morphology(gmap, FusionParams())
        assert (out.labels[10, 4:6, 0] == table.sidewalk_id).all()

    def test_closing_never_overwrites_assigned(self, table):
        plane = np.zeros((20, 20), dtype=np.uint8)
        plane[5:15, 4:6] = table.sidewalk_id
        plane[10, 4:6] = table.road_id
        gmap = make_map(plane, table, z_dim=2, free_above=False)
        out = refine_morphology(gmap, FusionParams(min_area=0.0))
        assert (out.labels[10, 4:6, 0] == table.road_id).all()


class TestFuseSequence:
    def test_axis_aligned_round_trip_exact(self):
        spec = WorldSpec(recipe="straight", extent=80.0, road_width=9.6)
        world = generate_world(spec)
        poses = straight_trajectory(spec, step=3.2)
        frames = sample_frames(world, poses, crop_dims=(100, 100, 16))
        fused = fuse_sequence(frames, poses, FusionParams())
        # compare on the overlap of the fused map and the world lattice
        vox = world.voxel_size
        off = np.round(np.array([fused.origin.x, fused.origin.y]) / vox).astype(int)
        lo = np.maximum(off, 0)                       # world-index window start
        hi = np.minimum(off + np.array(fused.dims[:2]), world.dims[:2])
        sub = fused.labels[lo[0] - off[0]:hi[0] - off[0],
                           lo[1] - off[1]:hi[1] - off[1], :]
        truth = world.labels[lo[0]:hi[0], lo[1]:hi[1], :]
        assigned = sub != world.table.unassigned_id
        assert assigned.sum() > 100_000
        assert np.array_equal(sub[assigned], truth[assigned])

    def test_params_validation(self):
        with pytest.raises(ValueError):
            FusionParams(d_max=0)
        with pytest.raises(ValueError):
            FusionParams(tau_vote=0)
