"""Evaluation protocols: segmentation overlap (convex-hull IoU), descriptor
retrieval rank curves, and localization accuracy statistics.

Hull IoU is a Monte-Carlo estimate (uniform samples in the union's bounding
box tested against both hulls' half-spaces) with a binomial standard error, so
tolerances can be stated in standard errors rather than ad-hoc epsilons.
"""

from __future__ import annotations

import csv
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .core import Pose, compose, quat_angle, quat_slerp, transform_point
from .descriptor import Backend, describe
from .localize import LocalizationResult, TargetMap
from .localmap import SegmentObservation


# ---------------------------------------------------------------------------
# segmentation IoU
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IoUEstimate:
    value: float
    std_error: float
    degenerate: bool = False


@dataclass(frozen=True)
class IoUPair:
    id_a: int
    id_b: int
    iou: IoUEstimate


@dataclass(frozen=True)
class IoUReport:
    pairs: tuple[IoUPair, ...]
    threshold: float = 0.33
    bin_width: float = 0.1

    @property
    def n_consistent(self) -> int:
        return sum(1 for p in self.pairs if p.iou.value >= self.threshold)

    @property
    def n_inconsistent(self) -> int:
        return sum(1 for p in self.pairs if p.iou.value < self.threshold)

    def histogram(self) -> tuple[np.ndarray, np.ndarray]:
        edges = np.arange(0.0, 1.0 + self.bin_width / 2, self.bin_width)
        values = [p.iou.value for p in self.pairs]
        counts, _ = np.histogram(values, bins=edges)
        return counts, edges


def _hull(points: np.ndarray) -> Optional[ConvexHull]:
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 4:
        return None
    try:
        return ConvexHull(points)
    except QhullError:
        return None


def _inside(hull: ConvexHull, samples: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    # hull.equations rows are (normal, offset) with normal.x + offset <= 0 inside
    eq = hull.equations
    return np.all(samples @ eq[:, :3].T + eq[:, 3] <= tol, axis=1)


def hull_iou(points_a: np.ndarray, points_b: np.ndarray,
             n_samples: int = 20000, seed: int = 0) -> IoUEstimate:
    """Monte-Carlo intersection-over-union of the two convex hulls."""
    hull_a = _hull(points_a)
    hull_b = _hull(points_b)
    if hull_a is None or hull_b is None:
        if hull_a is None and hull_b is None:
            pa = np.asarray(points_a, dtype=np.float64)
            pb = np.asarray(points_b, dtype=np.float64)
            if pa.shape == pb.shape and np.array_equal(np.sort(pa, axis=0),
                                                      np.sort(pb, axis=0)):
                return IoUEstimate(1.0, 0.0, degenerate=True)
        return IoUEstimate(0.0, 0.0, degenerate=True)
    lo = np.minimum(hull_a.min_bound, hull_b.min_bound)
    hi = np.maximum(hull_a.max_bound, hull_b.max_bound)
    rng = np.random.default_rng(seed)
    samples = rng.uniform(lo, hi, size=(n_samples, 3))
    in_a = _inside(hull_a, samples)
    in_b = _inside(hull_b, samples)
    n_union = int((in_a | in_b).sum())
    n_inter = int((in_a & in_b).sum())
    if n_union == 0:
        return IoUEstimate(0.0, 0.0)
    p = n_inter / n_union
    stderr = math.sqrt(p * (1.0 - p) / n_union)
    return IoUEstimate(p, stderr)


def pair_segments(run_a: Sequence[SegmentObservation],
                  run_b: Sequence[SegmentObservation],
                  gate: float = 2.0, n_samples: int = 20000,
                  seed: int = 0, threshold: float = 0.33) -> IoUReport:
    """Greedy maximum-IoU pairing of segments observed at the same location.

    Only pairs whose centroids lie within the gate are scored; pairs are
    accepted in descending IoU order without reusing a segment.
    """
    scored = []
    for i, a in enumerate(run_a):
        for j, b in enumerate(run_b):
            if np.linalg.norm(a.centroid - b.centroid) > gate:
                continue
            est = hull_iou(a.xyz, b.xyz, n_samples=n_samples, seed=seed)
            scored.append((est.value, i, j, est))
    scored.sort(key=lambda s: (-s[0], s[1], s[2]))
    used_a: set[int] = set()
    used_b: set[int] = set()
    pairs = []
    for _, i, j, est in scored:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append(IoUPair(run_a[i].segment_id, run_b[j].segment_id, est))
    return IoUReport(tuple(pairs), threshold=threshold)


# ---------------------------------------------------------------------------
# retrieval curves
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RetrievalRecord:
    query_segment_id: int
    truth_id: int
    completeness: float
    rank: Optional[int]  # None when the true id is absent from the map


@dataclass(frozen=True)
class RetrievalCurve:
    records: tuple[RetrievalRecord, ...]
    bucket_width: float = 0.1

    def recall_at(self, k: int) -> float:
        ranked = [r for r in self.records if r.rank is not None]
        if not ranked:
            return 0.0
        return sum(1 for r in ranked if r.rank <= k) / len(ranked)

    def bucket_table(self) -> list[tuple[float, float, int]]:
        """(bucket lower edge, mean rank, count) per completeness bucket."""
        buckets: dict[int, list[int]] = {}
        for r in self.records:
            if r.rank is None:
                continue
            b = min(int(r.completeness / self.bucket_width),
                    int(round(1.0 / self.bucket_width)) - 1)
            buckets.setdefault(b, []).append(r.rank)
        return [(b * self.bucket_width, float(np.mean(ranks)), len(ranks))
                for b, ranks in sorted(buckets.items())]


def retrieval_curve(queries: Sequence[tuple[SegmentObservation, int, float]],
                    target_map: TargetMap, backend: Backend,
                    seed: int = 0) -> RetrievalCurve:
    """Rank of each query's true map entry under descriptor distance.

    queries holds (observation, ground-truth map id, completeness in (0,1]).
    Ties are broken by smaller segment id, matching k-NN retrieval.
    """
    id_list = target_map.ids.astype(np.int64)
    records = []
    for obs, truth_id, completeness in queries:
        if truth_id not in id_list:
            records.append(RetrievalRecord(obs.segment_id, truth_id,
                                           completeness, None))
            continue
        desc = describe(backend, obs, seed=seed)
        dists = np.linalg.norm(target_map.descriptors - desc, axis=1)
        order = np.lexsort((id_list, dists))
        rank = int(np.nonzero(id_list[order] == truth_id)[0][0]) + 1
        records.append(RetrievalRecord(obs.segment_id, truth_id,
                                       completeness, rank))
    return RetrievalCurve(tuple(records))


# ---------------------------------------------------------------------------
# localization accuracy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AccuracyEntry:
    timestamp: float
    translation_error: float  # meters
    rotation_error: float     # degrees


@dataclass(frozen=True)
class AccuracyReport:
    entries: tuple[AccuracyEntry, ...]
    dropped: int = 0  # results outside the ground-truth time range

    @property
    def n_below_1m(self) -> int:
        return sum(1 for e in self.entries if e.translation_error < 1.0)

    @property
    def n_below_5m(self) -> int:
        return sum(1 for e in self.entries if e.translation_error < 5.0)

    def cumulative_curve(self) -> tuple[np.ndarray, np.ndarray]:
        """Sorted translation errors vs cumulative localization count."""
        errs = np.sort([e.translation_error for e in self.entries])
        return errs, np.arange(1, len(errs) + 1)


def interpolate_pose(stream: Sequence[tuple[float, Pose]], t: float) -> Pose:
    """Linear translation / spherical rotation interpolation at time t.

    Raises ValueError outside the stream's time range.
    """
    times = [s[0] for s in stream]
    if not times or t < times[0] or t > times[-1]:
        raise ValueError(f"timestamp {t} outside ground-truth range")
    i = bisect_right(times, t)
    if i == len(times):
        return stream[-1][1]
    if i == 0:
        return stream[0][1]
    t0, p0 = stream[i - 1]
    t1, p1 = stream[i]
    if t1 == t0:
        return p0
    alpha = (t - t0) / (t1 - t0)
    trans = (1 - alpha) * p0.translation + alpha * p1.translation
    rot = quat_slerp(p0.rotation, p1.rotation, alpha)
    return Pose(trans, rot)


def accuracy_report(results: Sequence[LocalizationResult],
                    ground_truth: Sequence[tuple[float, Pose]],
                    odometry: Optional[Sequence[tuple[float, Pose]]] = None
                    ) -> AccuracyReport:
    """Pose error of each localization against interpolated ground truth.

    The estimated pose is the returned transform applied to the robot's
    odometry pose at the result timestamp; odometry defaults to the ground
    truth stream (noise-free mapping runs).
    """
    odometry = odometry if odometry is not None else ground_truth
    entries = []
    dropped = 0
    for res in results:
        try:
            gt = interpolate_pose(ground_truth, res.timestamp)
            odo = interpolate_pose(odometry, res.timestamp)
        except ValueError:
            dropped += 1
            continue
        est = compose(res.transform, odo)
        terr = float(np.linalg.norm(est.translation - gt.translation))
        rerr = math.degrees(quat_angle(est.rotation, gt.rotation))
        entries.append(AccuracyEntry(res.timestamp, terr, rerr))
    return AccuracyReport(tuple(entries), dropped=dropped)


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def write_iou_csv(report: IoUReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["segment_a", "segment_b", "iou", "std_error", "degenerate"])
        for p in report.pairs:
            w.writerow([p.id_a, p.id_b, f"{p.iou.value:.6f}",
                        f"{p.iou.std_error:.6f}", int(p.iou.degenerate)])


def write_retrieval_csv(curve: RetrievalCurve, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["query_segment", "truth_id", "completeness", "rank"])
        for r in curve.records:
            w.writerow([r.query_segment_id, r.truth_id,
                        f"{r.completeness:.4f}",
                        r.rank if r.rank is not None else "not_in_map"])


def write_accuracy_csv(report: AccuracyReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["timestamp", "translation_error_m", "rotation_error_deg"])
        for e in report.entries:
            w.writerow([f"{e.timestamp:.6f}", f"{e.translation_error:.6f}",
                        f"{e.rotation_error:.6f}"])
