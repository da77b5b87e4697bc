"""Robot-following cylindrical voxel map with color/class fusion and
incremental semantic segmentation.

Clustering happens at voxel level: each active voxel contributes one
representative (running centroid, circular-mean hue, majority-vote class) and
single-linkage components are grown incrementally over newly active voxels
under the augmented distance metric. Restricting the neighbor search to the
spatial radius d_segment is exact because the color/class penalties are
non-negative.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import ClassTable, EnrichedPoint, PointCloudFrame

VoxelKey = tuple[int, int, int]

_HUE_MEAN_EPS = 1e-12


@dataclass(frozen=True)
class SegmentationParams:
    d_segment: float = 0.3
    t_h: float = 0.1
    p_h: float = 0.05
    p_c: float = 0.15
    min_segment_points: int = 100

    def __post_init__(self):
        if self.d_segment <= 0:
            raise ValueError("d_segment must be positive")
        if not 0.0 <= self.t_h <= 0.5:
            raise ValueError("t_h must lie in [0, 0.5]")
        if self.p_h < 0 or self.p_c < 0:
            raise ValueError("penalties must be non-negative")
        if self.p_h >= self.d_segment or self.p_c >= self.d_segment:
            warnings.warn("penalties should stay below d_segment so that very "
                          "close points can still join one segment")


@dataclass(frozen=True)
class LocalMapParams:
    radius_R: float = 50.0
    voxel_size: float = 0.1
    filter_dynamic: bool = True

    def __post_init__(self):
        if not self.radius_R > self.voxel_size > 0:
            raise ValueError("need radius_R > voxel_size > 0")


def f_h(delta_h: float, params: SegmentationParams) -> float:
    """Hue penalty: p_h when the cyclic hue difference exceeds t_h."""
    cyclic = min(delta_h, 1.0 - delta_h)
    return params.p_h if cyclic > params.t_h else 0.0


def f_c(c1: Optional[int], c2: Optional[int], params: SegmentationParams) -> float:
    """Class penalty: p_c on mismatch; missing labels impose no penalty."""
    if c1 is None or c2 is None:
        return 0.0
    return 0.0 if c1 == c2 else params.p_c


def pair_distance(p1: EnrichedPoint, p2: EnrichedPoint,
                  params: SegmentationParams) -> float:
    """Euclidean distance augmented with hue and class penalties."""
    dx = p1.x - p2.x
    dy = p1.y - p2.y
    dz = p1.z - p2.z
    d2 = dx * dx + dy * dy + dz * dz
    if p1.color_valid and p2.color_valid:
        d2 += f_h(abs(p1.h - p2.h), params) ** 2
    c1 = p1.c if p1.class_valid else None
    c2 = p2.c if p2.class_valid else None
    d2 += f_c(c1, c2, params) ** 2
    return math.sqrt(d2)


class Voxel:
    """Running fusion state for one grid cell."""

    __slots__ = ("key", "n", "sum_xyz", "n_color", "sum_cos", "sum_sin",
                 "sum_s", "sum_v", "last_h", "class_counts", "segment_id")

    def __init__(self, key: VoxelKey):
        self.key = key
        self.n = 0
        self.sum_xyz = np.zeros(3)
        self.n_color = 0
        self.sum_cos = 0.0
        self.sum_sin = 0.0
        self.sum_s = 0.0
        self.sum_v = 0.0
        self.last_h = 0.0
        self.class_counts: dict[int, int] = {}
        self.segment_id: Optional[int] = None

    @property
    def centroid(self) -> np.ndarray:
        return self.sum_xyz / self.n

    @property
    def color_valid(self) -> bool:
        return self.n_color > 0

    def fused_hue(self) -> float:
        """Circular mean of inserted hues; falls back to the last value when
        the accumulated unit vectors cancel out."""
        norm = math.hypot(self.sum_cos, self.sum_sin)
        if norm < _HUE_MEAN_EPS:
            return self.last_h
        h = math.atan2(self.sum_sin, self.sum_cos) / (2.0 * math.pi)
        h %= 1.0
        # x % 1.0 rounds to exactly 1.0 for tiny negative x
        return 0.0 if h >= 1.0 else h

    def mean_sv(self) -> tuple[float, float]:
        if self.n_color == 0:
            return 0.0, 0.0
        return self.sum_s / self.n_color, self.sum_v / self.n_color


def majority_class(v: Voxel) -> Optional[int]:
    """Majority-vote class; ties go to the smallest id; None when unlabeled."""
    if not v.class_counts:
        return None
    best = max(v.class_counts.items(), key=lambda kv: (kv[1], -kv[0]))
    return best[0]


class Segment:
    __slots__ = ("id", "keys", "next_obs_index", "last_snapshot_count")

    def __init__(self, sid: int):
        self.id = sid
        self.keys: set[VoxelKey] = set()
        self.next_obs_index = 0
        self.last_snapshot_count = 0


@dataclass(frozen=True)
class SegmentObservation:
    """Snapshot of a segment's fused voxel representatives at one time."""

    segment_id: int
    obs_index: int
    timestamp: float
    xyz: np.ndarray          # (n, 3) world frame
    hsv: np.ndarray          # (n, 3) fused values
    cls: np.ndarray          # (n,) uint16 majority classes
    color_valid: np.ndarray  # (n,) bool
    class_valid: np.ndarray  # (n,) bool
    centroid: np.ndarray     # (3,)
    is_final: bool = False

    @property
    def point_count(self) -> int:
        return self.xyz.shape[0]


@dataclass
class SegmentationDelta:
    created: list[int] = field(default_factory=list)
    merged: list[tuple[int, int]] = field(default_factory=list)  # (survivor, absorbed)
    grown: list[int] = field(default_factory=list)


class LocalMap:
    """Single-writer cylindrical voxel map.

    insert_frame / grow_segments / recenter must be called in stream order by
    one owner; the emitted SegmentObservations are immutable snapshots.
    """

    def __init__(self, params: LocalMapParams, seg_params: SegmentationParams,
                 class_table: Optional[ClassTable] = None):
        self.params = params
        self.seg_params = seg_params
        self.class_table = class_table or ClassTable()
        self.voxels: dict[VoxelKey, Voxel] = {}
        self.segments: dict[int, Segment] = {}
        self._next_segment_id = 1
        self._dirty: set[VoxelKey] = set()

    # -- insertion ----------------------------------------------------------

    def insert_frame(self, frame: PointCloudFrame) -> list[VoxelKey]:
        """Fuse a frame into the grid; returns voxels activated for the first
        time (lexicographically sorted, so insertion order is deterministic)."""
        world = frame.world_xyz()
        hsv = frame.hsv
        cls = frame.cls
        cv = frame.color_valid
        lv = frame.class_valid
        if self.params.filter_dynamic:
            dyn = self.class_table.dynamic_ids()
            if dyn:
                drop = lv & np.isin(cls, list(dyn))
                keep = ~drop
                world, hsv, cls, cv, lv = (world[keep], hsv[keep], cls[keep],
                                           cv[keep], lv[keep])
        if len(world) == 0:
            return []
        keys = np.floor(world / self.params.voxel_size).astype(np.int64)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        m = len(uniq)
        n_pts = np.bincount(inv, minlength=m)
        sum_x = np.bincount(inv, weights=world[:, 0], minlength=m)
        sum_y = np.bincount(inv, weights=world[:, 1], minlength=m)
        sum_z = np.bincount(inv, weights=world[:, 2], minlength=m)
        cw = cv.astype(float)
        n_color = np.bincount(inv, weights=cw, minlength=m)
        ang = 2.0 * np.pi * hsv[:, 0]
        sum_cos = np.bincount(inv, weights=np.cos(ang) * cw, minlength=m)
        sum_sin = np.bincount(inv, weights=np.sin(ang) * cw, minlength=m)
        sum_s = np.bincount(inv, weights=hsv[:, 1] * cw, minlength=m)
        sum_v = np.bincount(inv, weights=hsv[:, 2] * cw, minlength=m)
        # last observed hue per voxel (last color-valid point in frame order)
        last_h = np.zeros(m)
        has_last = np.zeros(m, dtype=bool)
        ci = np.nonzero(cv)[0]
        last_h[inv[ci]] = hsv[ci, 0]
        has_last[inv[ci]] = True
        # per-(voxel, class) counts for class-valid points
        li = np.nonzero(lv)[0]
        pair_codes = inv[li].astype(np.int64) * 65536 + cls[li].astype(np.int64)
        pc_uniq, pc_counts = np.unique(pair_codes, return_counts=True)

        new_keys: list[VoxelKey] = []
        vox_list: list[Voxel] = []
        for i in range(m):
            key = (int(uniq[i, 0]), int(uniq[i, 1]), int(uniq[i, 2]))
            vox = self.voxels.get(key)
            if vox is None:
                vox = Voxel(key)
                self.voxels[key] = vox
                new_keys.append(key)
            elif vox.segment_id is not None:
                self._dirty.add(key)
            vox.n += int(n_pts[i])
            vox.sum_xyz = vox.sum_xyz + np.array([sum_x[i], sum_y[i], sum_z[i]])
            vox.n_color += int(n_color[i])
            vox.sum_cos += float(sum_cos[i])
            vox.sum_sin += float(sum_sin[i])
            vox.sum_s += float(sum_s[i])
            vox.sum_v += float(sum_v[i])
            if has_last[i]:
                vox.last_h = float(last_h[i])
            vox_list.append(vox)
        for code, cnt in zip(pc_uniq, pc_counts):
            vox = vox_list[int(code) // 65536]
            cid = int(code) % 65536
            vox.class_counts[cid] = vox.class_counts.get(cid, 0) + int(cnt)
        return new_keys

    # -- clustering ---------------------------------------------------------

    def _rep(self, vox: Voxel):
        c = vox.centroid
        hue = vox.fused_hue() if vox.color_valid else None
        cls = majority_class(vox)
        return c, hue, cls

    def _aug_dist2(self, d2_spatial: float, rep_a, rep_b) -> float:
        p = self.seg_params
        d2 = d2_spatial
        if rep_a[1] is not None and rep_b[1] is not None:
            d2 += f_h(abs(rep_a[1] - rep_b[1]), p) ** 2
        d2 += f_c(rep_a[2], rep_b[2], p) ** 2
        return d2

    def grow_segments(self, new_voxels: Iterable[VoxelKey]) -> SegmentationDelta:
        """Incrementally extend the single-linkage partition over the newly
        active voxels (plus voxels whose fused state changed since the last
        call, which may trigger additional merges)."""
        new_keys = [k for k in new_voxels if k in self.voxels]
        probe_keys = list(new_keys)
        probe_keys += sorted(k for k in self._dirty if k in self.voxels
                             and k not in set(new_keys))
        self._dirty.clear()
        delta = SegmentationDelta()
        if not probe_keys and not new_keys:
            return delta

        all_keys = list(self.voxels.keys())
        key_index = {k: i for i, k in enumerate(all_keys)}
        reps = [self._rep(self.voxels[k]) for k in all_keys]
        centroids = np.array([r[0] for r in reps])
        tree = cKDTree(centroids)

        # union-find over voxel indices
        parent = list(range(len(all_keys)))

        def find(i: int) -> int:
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        def union(i: int, j: int):
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[rj] = ri

        # pre-merge voxels that already share a segment
        for seg in self.segments.values():
            it = iter(seg.keys)
            first = key_index[next(it)]
            for k in it:
                union(first, key_index[k])

        d = self.seg_params.d_segment
        probe_idx = [key_index[k] for k in probe_keys]
        neighborhoods = tree.query_ball_point(centroids[probe_idx], r=d)
        for pi, neigh in zip(probe_idx, neighborhoods):
            rp = reps[pi]
            for j in neigh:
                if j == pi:
                    continue
                diff = centroids[pi] - centroids[j]
                d2 = float(diff @ diff)
                if self._aug_dist2(d2, rp, reps[j]) < d * d:
                    union(pi, j)

        # collect components touching the probes / new voxels
        comp_members: dict[int, list[int]] = {}
        for i in range(len(all_keys)):
            comp_members.setdefault(find(i), []).append(i)

        assigned_before = {k: self.voxels[k].segment_id for k in all_keys}
        new_set = set(new_keys)
        for root, members in comp_members.items():
            seg_ids = sorted({assigned_before[all_keys[i]] for i in members
                              if assigned_before[all_keys[i]] is not None})
            unassigned = [i for i in members if assigned_before[all_keys[i]] is None
                          and all_keys[i] in new_set]
            if not seg_ids:
                if not unassigned:
                    continue
                sid = self._next_segment_id
                self._next_segment_id += 1
                seg = Segment(sid)
                self.segments[sid] = seg
                delta.created.append(sid)
            else:
                sid = seg_ids[0]
                seg = self.segments[sid]
                for other in seg_ids[1:]:
                    absorbed = self.segments.pop(other)
                    for k in absorbed.keys:
                        self.voxels[k].segment_id = sid
                    seg.keys |= absorbed.keys
                    delta.merged.append((sid, other))
                if unassigned:
                    delta.grown.append(sid)
            for i in unassigned:
                k = all_keys[i]
                self.voxels[k].segment_id = sid
                seg.keys.add(k)
        return delta

    # -- observations and eviction -----------------------------------------

    def _snapshot(self, seg: Segment, timestamp: float, is_final: bool,
                  keys: Optional[Sequence[VoxelKey]] = None) -> SegmentObservation:
        keys = sorted(keys if keys is not None else seg.keys)
        n = len(keys)
        xyz = np.zeros((n, 3))
        hsv = np.zeros((n, 3))
        cls = np.zeros(n, dtype=np.uint16)
        cv = np.zeros(n, dtype=bool)
        lv = np.zeros(n, dtype=bool)
        for i, k in enumerate(keys):
            vox = self.voxels[k]
            xyz[i] = vox.centroid
            if vox.color_valid:
                s, v = vox.mean_sv()
                hsv[i] = (vox.fused_hue(), s, v)
                cv[i] = True
            mc = majority_class(vox)
            if mc is not None:
                cls[i] = mc
                lv[i] = True
        obs = SegmentObservation(
            segment_id=seg.id, obs_index=seg.next_obs_index, timestamp=timestamp,
            xyz=xyz, hsv=hsv, cls=cls, color_valid=cv, class_valid=lv,
            centroid=xyz.mean(axis=0), is_final=is_final)
        seg.next_obs_index += 1
        seg.last_snapshot_count = len(seg.keys)
        return obs

    def recenter(self, new_center: np.ndarray, timestamp: float = 0.0
                 ) -> list[SegmentObservation]:
        """Evict voxels beyond the cylinder radius (horizontal distance) and
        emit observations: finals for fully evicted segments, eviction-state
        snapshots for straddlers, growth snapshots for enlarged segments."""
        new_center = np.asarray(new_center, dtype=np.float64).reshape(-1)[:2]
        r = self.params.radius_R
        evicted: list[VoxelKey] = []
        for k, vox in self.voxels.items():
            c = vox.centroid
            if math.hypot(c[0] - new_center[0], c[1] - new_center[1]) > r:
                evicted.append(k)
        observations: list[SegmentObservation] = []
        min_pts = self.seg_params.min_segment_points
        by_segment: dict[int, list[VoxelKey]] = {}
        for k in evicted:
            sid = self.voxels[k].segment_id
            if sid is not None:
                by_segment.setdefault(sid, []).append(k)
        for sid, keys in sorted(by_segment.items()):
            seg = self.segments[sid]
            full = len(keys) == len(seg.keys)
            if len(seg.keys) >= min_pts:
                # a full eviction finalizes the whole segment; a partial one
                # captures the evicted voxels before they are dropped
                observations.append(self._snapshot(
                    seg, timestamp, is_final=full,
                    keys=None if full else keys))
            if full:
                del self.segments[sid]
            else:
                seg.keys -= set(keys)
                seg.last_snapshot_count = len(seg.keys)
        for k in evicted:
            del self.voxels[k]
            self._dirty.discard(k)
        # growth snapshots for surviving segments
        for sid in sorted(self.segments):
            seg = self.segments[sid]
            if len(seg.keys) >= min_pts and len(seg.keys) > seg.last_snapshot_count:
                observations.append(self._snapshot(seg, timestamp, is_final=False))
        return observations

    def flush(self, timestamp: float = 0.0) -> list[SegmentObservation]:
        """Finalize every remaining segment (end of stream) and clear the map."""
        observations = []
        min_pts = self.seg_params.min_segment_points
        for sid in sorted(self.segments):
            seg = self.segments[sid]
            if len(seg.keys) >= min_pts:
                observations.append(self._snapshot(seg, timestamp, is_final=True))
        self.segments.clear()
        self.voxels.clear()
        self._dirty.clear()
        return observations

    # -- introspection ------------------------------------------------------

    def partition(self) -> dict[int, set[VoxelKey]]:
        """Current segment id -> voxel key set (copy)."""
        return {sid: set(seg.keys) for sid, seg in self.segments.items()}

    @property
    def voxel_count(self) -> int:
        return len(self.voxels)
