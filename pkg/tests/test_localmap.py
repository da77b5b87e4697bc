"""Voxel fusion, augmented distance, and incremental segmentation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semloc.core import ClassTable, EnrichedPoint, Pose
from semloc.localmap import (LocalMap, LocalMapParams, SegmentationParams,
                             Voxel, f_c, f_h, majority_class, pair_distance)

from conftest import (batch_linkage_oracle, insert_voxel_rows, make_frame,
                      map_partition, random_voxel_scene)

PARAMS = SegmentationParams()  # d_segment 0.3, t_h 0.1, p_h 0.05, p_c 0.15


def fresh_map(class_table=None, radius=500.0, min_points=1):
    return LocalMap(LocalMapParams(radius_R=radius, voxel_size=0.1),
                    SegmentationParams(min_segment_points=min_points),
                    class_table)


class TestPenalties:
    def test_f_h_below_threshold(self):
        assert f_h(0.05, PARAMS) == 0.0

    def test_f_h_cyclic(self):
        assert f_h(0.95, PARAMS) == 0.0

    def test_f_h_above_threshold(self):
        assert f_h(0.5, PARAMS) == 0.05

    def test_f_c_match(self):
        assert f_c(3, 3, PARAMS) == 0.0

    def test_f_c_mismatch(self):
        assert f_c(3, 7, PARAMS) == 0.15

    def test_f_c_missing(self):
        assert f_c(None, 3, PARAMS) == 0.0
        assert f_c(3, None, PARAMS) == 0.0


class TestPairDistance:
    def test_identical_points(self):
        p = EnrichedPoint(1, 2, 3, h=0.5, s=1, v=1, c=2,
                          color_valid=True, class_valid=True)
        assert pair_distance(p, p, PARAMS) == 0.0

    def test_class_penalty_case(self):
        p1 = EnrichedPoint(0, 0, 0, h=0.5, s=1, v=1, c=1,
                           color_valid=True, class_valid=True)
        p2 = EnrichedPoint(0.25, 0, 0, h=0.5, s=1, v=1, c=2,
                           color_valid=True, class_valid=True)
        assert pair_distance(p1, p2, PARAMS) == pytest.approx(
            np.sqrt(0.0625 + 0.0225), abs=1e-12)

    def test_full_penalty_case(self):
        p1 = EnrichedPoint(0, 0, 0, h=0.0, s=1, v=1, c=1,
                           color_valid=True, class_valid=True)
        p2 = EnrichedPoint(0.28, 0, 0, h=0.5, s=1, v=1, c=2,
                           color_valid=True, class_valid=True)
        d = pair_distance(p1, p2, PARAMS)
        assert d == pytest.approx(np.sqrt(0.0784 + 0.0025 + 0.0225), abs=1e-12)
        assert d > PARAMS.d_segment

    def test_missing_color_no_hue_penalty(self):
        p1 = EnrichedPoint(0, 0, 0, h=0.0, color_valid=False, class_valid=False)
        p2 = EnrichedPoint(0.1, 0, 0, h=0.5, s=1, v=1,
                           color_valid=True, class_valid=False)
        assert pair_distance(p1, p2, PARAMS) == pytest.approx(0.1, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_exact_pruning_lower_bound(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(-1, 1, 3)
        b = rng.uniform(-1, 1, 3)
        p1 = EnrichedPoint(*a, h=float(rng.uniform(0, 1)), s=1, v=1,
                           c=int(rng.integers(3)), color_valid=True,
                           class_valid=True)
        p2 = EnrichedPoint(*b, h=float(rng.uniform(0, 1)), s=1, v=1,
                           c=int(rng.integers(3)), color_valid=True,
                           class_valid=True)
        assert pair_distance(p1, p2, PARAMS) >= np.linalg.norm(a - b) - 1e-15

    def test_zero_penalties_reduce_to_euclidean(self):
        params = SegmentationParams(p_h=0.0, p_c=0.0)
        p1 = EnrichedPoint(0, 0, 0, h=0.0, s=1, v=1, c=1,
                           color_valid=True, class_valid=True)
        p2 = EnrichedPoint(0.2, 0.1, 0.0, h=0.5, s=1, v=1, c=2,
                           color_valid=True, class_valid=True)
        assert pair_distance(p1, p2, params) == pytest.approx(
            np.hypot(0.2, 0.1), abs=1e-12)


class TestSegmentationParams:
    def test_penalty_warning(self):
        with pytest.warns(UserWarning):
            SegmentationParams(d_segment=0.1, p_c=0.15)

    def test_invalid_rejected(self):
        with pytest.raises(ValueError):
            SegmentationParams(d_segment=-1)
        with pytest.raises(ValueError):
            SegmentationParams(t_h=0.7)


class TestVoxelFusion:
    def test_running_value_average(self):
        from semloc.core import PointCloudFrame
        lm = fresh_map()
        frame = PointCloudFrame(
            0.0, Pose.identity(),
            np.array([[0.01, 0.01, 0.01], [0.02, 0.02, 0.02]]),
            np.array([[0.5, 0.5, 0.2], [0.5, 0.5, 0.4]]),
            np.zeros(2, dtype=np.uint16), np.ones(2, dtype=bool),
            np.ones(2, dtype=bool))
        lm.insert_frame(frame)
        vox = next(iter(lm.voxels.values()))
        s, v = vox.mean_sv()
        assert v == pytest.approx(0.3, abs=1e-12)
        assert s == pytest.approx(0.5, abs=1e-12)

    def test_majority_voting_in_voxel(self):
        lm = fresh_map()
        frame = make_frame([[0.01, 0, 0], [0.02, 0, 0], [0.03, 0, 0]],
                           classes=[2, 2, 5])
        lm.insert_frame(frame)
        vox = next(iter(lm.voxels.values()))
        assert majority_class(vox) == 2

    def test_dynamic_class_filtered(self, class_table):
        lm = fresh_map(class_table)
        frame = make_frame([[0.01, 0, 0], [1.0, 1.0, 1.0]], classes=[7, 1])
        new = lm.insert_frame(frame)
        assert lm.voxel_count == 1
        assert len(new) == 1

    def test_circular_hue_mean(self):
        lm = fresh_map()
        frame = make_frame([[0.01, 0, 0], [0.02, 0, 0]], hues=[0.95, 0.05])
        lm.insert_frame(frame)
        vox = next(iter(lm.voxels.values()))
        from semloc.core import hue_difference
        assert hue_difference(vox.fused_hue(), 0.0) < 1e-9

    def test_hue_mean_matches_recomputation(self):
        rng = np.random.default_rng(5)
        hues = rng.uniform(0, 1, 40)
        lm = fresh_map()
        pts = np.tile([[0.05, 0.05, 0.05]], (40, 1))
        lm.insert_frame(make_frame(pts, hues=hues))
        vox = next(iter(lm.voxels.values()))
        ang = 2 * np.pi * hues
        expected = (np.arctan2(np.sin(ang).sum(), np.cos(ang).sum())
                    / (2 * np.pi)) % 1.0
        assert vox.fused_hue() == pytest.approx(expected, abs=1e-9)

    def test_degenerate_hue_mean_falls_back_to_last(self):
        lm = fresh_map()
        lm.insert_frame(make_frame([[0.01, 0, 0], [0.02, 0, 0]],
                                   hues=[0.0, 0.5]))
        vox = next(iter(lm.voxels.values()))
        assert vox.fused_hue() == 0.5

    def test_new_keys_sorted_and_first_activation_only(self):
        lm = fresh_map()
        first = lm.insert_frame(make_frame([[0.35, 0, 0], [0.05, 0, 0]]))
        assert first == sorted(first)
        assert len(first) == 2
        again = lm.insert_frame(make_frame([[0.05, 0, 0]]))
        assert again == []


class TestMajorityClass:
    def test_plain_majority(self):
        v = Voxel((0, 0, 0))
        v.class_counts = {2: 3, 5: 1}
        assert majority_class(v) == 2

    def test_tie_smallest_id(self):
        v = Voxel((0, 0, 0))
        v.class_counts = {5: 2, 2: 2}
        assert majority_class(v) == 2

    def test_empty(self):
        assert majority_class(Voxel((0, 0, 0))) is None


class TestGrowSegments:
    def test_isolated_voxel_singleton(self):
        lm = fresh_map()
        new = lm.insert_frame(make_frame([[0.05, 0.05, 0.05], [5, 5, 5]]))
        delta = lm.grow_segments(new)
        assert len(delta.created) == 2
        assert len(lm.partition()) == 2

    def test_close_boxes_same_class_join(self):
        lm = fresh_map()
        # two voxel clusters, representative gap 0.25 m, same class/color
        a = make_frame([[0.0, 0, 0]], classes=[1])
        b = make_frame([[0.25, 0, 0]], classes=[1])
        keys = lm.insert_frame(a) + lm.insert_frame(b)
        lm.grow_segments(keys)
        assert len(lm.partition()) == 1

    def test_close_boxes_different_class_split_at_027(self):
        lm = fresh_map()
        a = make_frame([[0.0, 0, 0]], classes=[1])
        b = make_frame([[0.27, 0, 0]], classes=[2])
        keys = lm.insert_frame(a) + lm.insert_frame(b)
        lm.grow_segments(keys)
        assert len(lm.partition()) == 2

    def test_merge_keeps_smallest_id(self):
        lm = fresh_map()
        k1 = lm.insert_frame(make_frame([[0.0, 0, 0]], classes=[1]))
        lm.grow_segments(k1)
        k2 = lm.insert_frame(make_frame([[0.5, 0, 0]], classes=[1]))
        lm.grow_segments(k2)
        assert sorted(lm.partition()) == [1, 2]
        # bridge voxel connects both
        k3 = lm.insert_frame(make_frame([[0.25, 0, 0]], classes=[1]))
        delta = lm.grow_segments(k3)
        assert delta.merged == [(1, 2)]
        assert sorted(lm.partition()) == [1]

    def test_incremental_matches_batch_oracle(self):
        params = SegmentationParams()
        for scene_seed in range(8):
            rng = np.random.default_rng(scene_seed)
            oracle_rows, insert_rows = random_voxel_scene(
                rng, n_blobs=int(rng.integers(4, 10)))
            oracle = batch_linkage_oracle(oracle_rows, params, 0.1)
            for order_seed in range(2):
                lm = LocalMap(LocalMapParams(radius_R=500.0, voxel_size=0.1),
                              params, ClassTable())
                order = np.random.default_rng(order_seed).permutation(
                    len(insert_rows))
                insert_voxel_rows(lm, insert_rows, order)
                assert map_partition(lm) == oracle

    def test_zero_penalty_equals_euclidean_oracle(self):
        params = SegmentationParams(p_h=0.0, p_c=0.0)
        rng = np.random.default_rng(77)
        oracle_rows, insert_rows = random_voxel_scene(rng, n_blobs=6)
        euclid_rows = [(k, c, None, None) for k, c, _, _ in oracle_rows]
        oracle = batch_linkage_oracle(euclid_rows, params, 0.1)
        lm = LocalMap(LocalMapParams(radius_R=500.0, voxel_size=0.1), params,
                      ClassTable())
        insert_voxel_rows(lm, insert_rows, range(len(insert_rows)))
        assert map_partition(lm) == oracle


class TestRecenter:
    def _grown_map(self, offset=0.0, n=6):
        lm = fresh_map(min_points=3)
        pts = [[offset + 0.05 * i, 0.02, 0.02] for i in range(0, n * 2, 2)]
        keys = lm.insert_frame(make_frame(pts, classes=[1] * n))
        lm.grow_segments(keys)
        return lm

    def test_no_evictions_within_radius(self):
        lm = self._grown_map()
        obs = lm.recenter(np.zeros(3), timestamp=1.0)
        # first growth snapshot is emitted, but nothing is evicted
        assert lm.voxel_count == 6
        assert all(not o.is_final for o in obs)

    def test_full_eviction_final_observation(self):
        lm = LocalMap(LocalMapParams(radius_R=5.0, voxel_size=0.1),
                      SegmentationParams(min_segment_points=3), ClassTable())
        pts = [[0.05 * i, 0.02, 0.02] for i in range(0, 12, 2)]
        keys = lm.insert_frame(make_frame(pts, classes=[1] * 6))
        lm.grow_segments(keys)
        obs = lm.recenter(np.array([100.0, 0.0, 0.0]), timestamp=2.0)
        finals = [o for o in obs if o.is_final]
        assert len(finals) == 1
        assert finals[0].point_count == 6
        assert lm.voxel_count == 0
        assert lm.partition() == {}

    def test_straddling_segment_partial_observation(self):
        lm = LocalMap(LocalMapParams(radius_R=5.0, voxel_size=0.1),
                      SegmentationParams(min_segment_points=3), ClassTable())
        # chain along x from 4.75 to 5.45: part inside radius 5, part outside
        pts = [[4.75 + 0.1 * i, 0.0, 0.0] for i in range(8)]
        keys = lm.insert_frame(make_frame(pts, classes=[1] * 8))
        lm.grow_segments(keys)
        assert len(lm.partition()) == 1
        total = sum(len(v) for v in lm.partition().values())
        obs = lm.recenter(np.zeros(3), timestamp=3.0)
        partials = [o for o in obs if not o.is_final]
        assert len(partials) == 1
        assert partials[0].point_count < total
        assert lm.voxel_count < 8

    def test_vertical_distance_ignored(self):
        lm = LocalMap(LocalMapParams(radius_R=5.0, voxel_size=0.1),
                      SegmentationParams(min_segment_points=1), ClassTable())
        keys = lm.insert_frame(make_frame([[0.05, 0.05, 100.0]]))
        lm.grow_segments(keys)
        lm.recenter(np.zeros(3))
        assert lm.voxel_count == 1  # cylinder, not sphere

    def test_min_points_gate(self):
        lm = fresh_map(min_points=100)
        keys = lm.insert_frame(make_frame([[0.05, 0, 0]]))
        lm.grow_segments(keys)
        obs = lm.recenter(np.array([1000.0, 0, 0]))
        assert obs == []

    def test_flush_finalizes_everything(self):
        lm = self._grown_map()
        obs = lm.flush(timestamp=9.0)
        assert len(obs) == 1
        assert obs[0].is_final
        assert obs[0].timestamp == 9.0
        assert lm.voxel_count == 0

    def test_observation_indices_increase(self):
        lm = self._grown_map()
        first = lm.recenter(np.zeros(3), timestamp=1.0)
        keys = lm.insert_frame(make_frame([[0.65, 0.02, 0.02]], classes=[1]))
        lm.grow_segments(keys)
        second = lm.recenter(np.zeros(3), timestamp=2.0)
        assert first[0].segment_id == second[0].segment_id
        assert second[0].obs_index == first[0].obs_index + 1


class TestMemoryBound:
    def test_voxel_count_bounded_while_streaming(self):
        lm = LocalMap(LocalMapParams(radius_R=2.0, voxel_size=0.1),
                      SegmentationParams(min_segment_points=1), ClassTable())
        counts = []
        for step in range(30):
            x = step * 0.5
            pts = [[x + 0.05 * j, 0.0, 0.0] for j in range(8)]
            keys = lm.insert_frame(make_frame(pts, classes=[1] * 8))
            lm.grow_segments(keys)
            lm.recenter(np.array([x, 0.0, 0.0]))
            counts.append(lm.voxel_count)
        assert max(counts[5:]) <= max(counts[:5]) + 8
