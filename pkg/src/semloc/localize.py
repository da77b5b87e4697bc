"""Target-map construction, k-NN candidate retrieval, and RANSAC geometric
verification producing 6-DoF localization constraints.

k-NN is an exact linear scan (ties broken by smaller segment id). RANSAC
samples 3 correspondences per hypothesis, aligns centroids with a closed-form
least-squares fit, and counts at most one inlier per query segment.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import Pose, quat_from_matrix, transform_point
from .descriptor import Backend, backend_hash, describe, descriptor_distance
from .localmap import SegmentObservation

MAP_MAGIC = b"SSMM"
MAP_VERSION = 1


class DegenerateGeometryError(ValueError):
    pass


class BackendMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TargetMap:
    """Compact localization reference: one (id, centroid, descriptor) entry
    per segment, taken from its final observation."""

    ids: np.ndarray          # (N,) uint64
    centroids: np.ndarray    # (N, 3) float32 precision
    descriptors: np.ndarray  # (N, D) float32 precision
    class_table_hash: int = 0
    backend_hash: int = 0

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.uint64)
        if len(set(ids.tolist())) != len(ids):
            raise ValueError("duplicate segment ids in target map")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "centroids",
                           np.asarray(self.centroids, dtype=np.float64).reshape(len(ids), 3))
        descs = np.asarray(self.descriptors, dtype=np.float64)
        if len(ids) == 0:
            descs = descs.reshape(0, descs.shape[1] if descs.ndim == 2 else 0)
        else:
            descs = descs.reshape(len(ids), -1)
        object.__setattr__(self, "descriptors", descs)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1] if len(self) else 0


@dataclass(frozen=True)
class MatchCandidate:
    query_id: int
    query_centroid: np.ndarray
    target_id: int
    target_centroid: np.ndarray
    distance: float

    def __post_init__(self):
        if self.distance < 0:
            raise ValueError("descriptor distance must be non-negative")


@dataclass(frozen=True)
class RansacParams:
    min_inliers: int = 6            # 7 for noisier real-world style data
    max_centroid_dist: float = 0.4
    max_iterations: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.min_inliers < 3:
            raise ValueError("min_inliers must be at least the sample size (3)")


@dataclass(frozen=True)
class LocalizationResult:
    transform: Pose                      # target <- local
    inliers: tuple[MatchCandidate, ...]
    timestamp: float = 0.0

    @property
    def inlier_count(self) -> int:
        return len(self.inliers)


def build_target_map(observations: Sequence[SegmentObservation],
                     backend: Backend, seed: int = 0,
                     class_table_hash: int = 0) -> TargetMap:
    """One entry per segment id from its final observation only."""
    finals = [o for o in observations if o.is_final]
    seen = set()
    for o in finals:
        if o.segment_id in seen:
            raise ValueError(f"duplicate final observation for segment {o.segment_id}")
        seen.add(o.segment_id)
    n = len(finals)
    dim = backend.dim
    ids = np.zeros(n, dtype=np.uint64)
    cents = np.zeros((n, 3))
    descs = np.zeros((n, dim))
    for i, o in enumerate(finals):
        ids[i] = o.segment_id
        cents[i] = o.centroid
        descs[i] = describe(backend, o, seed=seed)
    return TargetMap(ids, cents, descs,
                     class_table_hash=class_table_hash,
                     backend_hash=backend_hash(backend))


@dataclass(frozen=True)
class Neighbor:
    target_id: int
    target_centroid: np.ndarray
    distance: float


def knn(query: np.ndarray, target_map: TargetMap, k: int) -> list[Neighbor]:
    """Exact k nearest entries by descriptor distance, non-decreasing, ties
    broken by smaller segment id."""
    if len(target_map) == 0:
        raise ValueError("target map is empty")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (target_map.dim,):
        raise ValueError("query dimension does not match the map")
    dists = np.linalg.norm(target_map.descriptors - query, axis=1)
    order = np.lexsort((target_map.ids, dists))[:k]
    return [Neighbor(int(target_map.ids[i]), target_map.centroids[i].copy(),
                     float(dists[i])) for i in order]


def rigid_align(pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> Pose:
    """Least-squares rigid transform mapping source points onto targets.

    Each pair is (source, target); minimizes sum ||R*source + t - target||^2
    via centroid subtraction and SVD of the cross-covariance, forcing a proper
    rotation (det +1). Raises DegenerateGeometryError for collinear sources.
    """
    if len(pairs) < 3:
        raise DegenerateGeometryError("need at least 3 correspondences")
    src = np.array([p[0] for p in pairs], dtype=np.float64)
    dst = np.array([p[1] for p in pairs], dtype=np.float64)
    src_c = src.mean(axis=0)
    dst_c = dst.mean(axis=0)
    a = src - src_c
    b = dst - dst_c
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[1] < 1e-9 * max(sv[0], 1.0):
        raise DegenerateGeometryError("source points are (near-)collinear")
    h = a.T @ b
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    corr = np.diag([1.0, 1.0, d])
    r = vt.T @ corr @ u.T
    t = dst_c - r @ src_c
    return Pose(t, quat_from_matrix(r))


def _count_inliers(candidates: Sequence[MatchCandidate], transform: Pose,
                   max_dist: float) -> list[MatchCandidate]:
    """At most one inlier per query segment (the closest one)."""
    best: dict[int, tuple[float, MatchCandidate]] = {}
    r = transform.rotation_matrix()
    t = transform.translation
    for cand in candidates:
        moved = r @ cand.query_centroid + t
        err = float(np.linalg.norm(moved - cand.target_centroid))
        if err < max_dist:
            cur = best.get(cand.query_id)
            if cur is None or err < cur[0]:
                best[cand.query_id] = (err, cand)
    return [v[1] for _, v in sorted(best.items())]


def ransac_verify(candidates: Sequence[MatchCandidate], params: RansacParams,
                  timestamp: float = 0.0) -> Optional[LocalizationResult]:
    """RANSAC over centroid correspondences; None when no hypothesis reaches
    min_inliers. Deterministic under a fixed seed."""
    candidates = list(candidates)
    if len(candidates) < 3:
        return None
    rng = np.random.default_rng(params.seed)
    best_inliers: list[MatchCandidate] = []
    best_transform: Optional[Pose] = None
    n = len(candidates)
    for _ in range(params.max_iterations):
        pick = rng.choice(n, size=3, replace=False)
        sample = [candidates[int(i)] for i in pick]
        if len({c.query_id for c in sample}) < 3:
            continue
        if len({c.target_id for c in sample}) < 3:
            continue
        try:
            hyp = rigid_align([(c.query_centroid, c.target_centroid)
                               for c in sample])
        except DegenerateGeometryError:
            continue
        inliers = _count_inliers(candidates, hyp, params.max_centroid_dist)
        if len(inliers) > len(best_inliers):
            best_inliers = inliers
            best_transform = hyp
    if best_transform is None or len(best_inliers) < params.min_inliers:
        return None
    # refit on all inliers; keep the refit only if it preserves the inlier
    # predicate at the required count, otherwise fall back to the hypothesis
    try:
        refit = rigid_align([(c.query_centroid, c.target_centroid)
                             for c in best_inliers])
        refit_inliers = _count_inliers(candidates, refit, params.max_centroid_dist)
        if len(refit_inliers) >= params.min_inliers:
            return LocalizationResult(refit, tuple(refit_inliers), timestamp)
    except DegenerateGeometryError:
        pass
    return LocalizationResult(best_transform, tuple(best_inliers), timestamp)


def localize_step(local_segments: Sequence[tuple[SegmentObservation, np.ndarray]],
                  target_map: TargetMap, k: int, params: RansacParams,
                  expected_backend_hash: Optional[int] = None,
                  timestamp: float = 0.0) -> Optional[LocalizationResult]:
    """Pool k-NN candidates over all current local segments and verify.

    local_segments pairs each observation with its descriptor; the descriptors
    must come from the same backend as the map (checked via the stored hash
    when expected_backend_hash is given).
    """
    if expected_backend_hash is not None and target_map.backend_hash not in (
            0, expected_backend_hash):
        raise BackendMismatchError("map was built with a different backend")
    if not local_segments or len(target_map) == 0:
        return None
    pooled: list[MatchCandidate] = []
    for obs, desc in local_segments:
        for nb in knn(desc, target_map, k):
            pooled.append(MatchCandidate(
                query_id=obs.segment_id, query_centroid=np.array(obs.centroid),
                target_id=nb.target_id, target_centroid=nb.target_centroid,
                distance=nb.distance))
    return ransac_verify(pooled, params, timestamp=timestamp)


# ---------------------------------------------------------------------------
# map serialization (little-endian binary, magic "SSMM")
# ---------------------------------------------------------------------------

def serialize_map(target_map: TargetMap) -> bytes:
    d = target_map.dim
    out = [MAP_MAGIC, struct.pack("<HHQQI", MAP_VERSION, d,
                                  target_map.class_table_hash,
                                  target_map.backend_hash, len(target_map))]
    for i in range(len(target_map)):
        out.append(struct.pack("<Q", int(target_map.ids[i])))
        out.append(target_map.centroids[i].astype("<f4").tobytes())
        out.append(target_map.descriptors[i].astype("<f4").tobytes())
    return b"".join(out)


def save_map(target_map: TargetMap, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_map(target_map))


def load_map(path) -> TargetMap:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAP_MAGIC:
        raise ValueError("not a target map file")
    version, dim, ct_hash, be_hash, count = struct.unpack("<HHQQI", data[4:28])
    if version != MAP_VERSION:
        raise ValueError(f"unsupported map file version {version}")
    entry_size = 8 + 12 + 4 * dim
    if len(data) != 28 + entry_size * count:
        raise ValueError("map file size does not match the header")
    ids = np.zeros(count, dtype=np.uint64)
    cents = np.zeros((count, 3))
    descs = np.zeros((count, dim))
    off = 28
    for i in range(count):
        ids[i] = struct.unpack("<Q", data[off:off + 8])[0]
        cents[i] = np.frombuffer(data[off + 8:off + 20], dtype="<f4")
        descs[i] = np.frombuffer(data[off + 20:off + entry_size], dtype="<f4")
        off += entry_size
    return TargetMap(ids, cents, descs, class_table_hash=ct_hash,
                     backend_hash=be_hash)
