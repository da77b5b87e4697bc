"""Shared domain types and rigid-body math.

All map data lives in the world frame (the ground-truth/odometry frame of the
dataset); point cloud frames carry sensor-frame points plus the world<-sensor
pose. Rotations are stored as unit quaternions (w, x, y, z) and re-normalized
after every composition to avoid drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

QUAT_NORM_TOL = 1e-9


def _as_readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z)
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_axis_angle(axis: Sequence[float], angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise ValueError("zero rotation axis")
    axis = axis / n
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (Shepperd's method)."""
    m = np.asarray(m, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_slerp(qa: np.ndarray, qb: np.ndarray, t: float) -> np.ndarray:
    qa = np.asarray(qa, dtype=np.float64)
    qb = np.asarray(qb, dtype=np.float64)
    dot = float(np.dot(qa, qb))
    if dot < 0.0:
        qb = -qb
        dot = -dot
    if dot > 1.0 - 1e-12:
        return quat_normalize(qa + t * (qb - qa))
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    sin_theta = np.sin(theta)
    return quat_normalize(
        np.sin((1.0 - t) * theta) / sin_theta * qa + np.sin(t * theta) / sin_theta * qb
    )


def quat_angle(qa: np.ndarray, qb: np.ndarray) -> float:
    """Geodesic angle (radians) between two unit quaternions."""
    dot = abs(float(np.dot(qa, qb)))
    return 2.0 * np.arccos(np.clip(dot, -1.0, 1.0))


# ---------------------------------------------------------------------------
# Pose
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """Rigid transform: translation (m) + unit quaternion (w, x, y, z)."""

    translation: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        t = _as_readonly(np.asarray(self.translation, dtype=np.float64).reshape(3))
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"quaternion norm {n} too far from 1")
        q = _as_readonly(q / n)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", q)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    @staticmethod
    def from_axis_angle(axis: Sequence[float], angle: float,
                        translation: Sequence[float] = (0.0, 0.0, 0.0)) -> "Pose":
        return Pose(np.asarray(translation, dtype=np.float64),
                    quat_from_axis_angle(axis, angle))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def inverse(self) -> "Pose":
        qi = quat_conjugate(self.rotation)
        ti = -quat_to_matrix(qi) @ self.translation
        return Pose(ti, qi)


def compose(a: Pose, b: Pose) -> Pose:
    """a∘b: applying the result equals applying b then a."""
    q = quat_normalize(quat_multiply(a.rotation, b.rotation))
    t = a.rotation_matrix() @ b.translation + a.translation
    return Pose(t, q)


def transform_point(p: Pose, pt: np.ndarray) -> np.ndarray:
    """R·pt + t. Accepts a single point (3,) or a batch (N, 3)."""
    pt = np.asarray(pt, dtype=np.float64)
    r = p.rotation_matrix()
    if pt.ndim == 1:
        return r @ pt + p.translation
    return pt @ r.T + p.translation


def hue_difference(h1, h2):
    """Cyclic distance on the hue circle, in [0, 0.5]."""
    h1 = np.asarray(h1, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    if np.any(h1 < 0) or np.any(h1 >= 1) or np.any(h2 < 0) or np.any(h2 >= 1):
        raise ValueError("hue values must lie in [0, 1)")
    d = np.abs(h1 - h2)
    out = np.minimum(d, 1.0 - d)
    if out.ndim == 0:
        return float(out)
    return out


# ---------------------------------------------------------------------------
# Enriched points and frames
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnrichedPoint:
    """A 3D point with optional HSV color and semantic class label."""

    x: float
    y: float
    z: float
    h: float = 0.0
    s: float = 0.0
    v: float = 0.0
    c: int = 0
    color_valid: bool = False
    class_valid: bool = False

    def __post_init__(self):
        if self.color_valid:
            if not (0.0 <= self.h < 1.0 and 0.0 <= self.s <= 1.0 and 0.0 <= self.v <= 1.0):
                raise ValueError("HSV components out of range")
        if self.c < 0 or self.c > 0xFFFF:
            raise ValueError("class id must fit in 16 bits")


@dataclass(frozen=True)
class PointCloudFrame:
    """One sensor sweep: sensor-frame points plus the world<-sensor pose.

    Point data is stored as parallel numpy arrays for throughput; use
    `point(i)` / `points()` for the per-point view.
    """

    timestamp: float
    pose: Pose
    xyz: np.ndarray          # (N, 3) sensor frame
    hsv: np.ndarray          # (N, 3)
    cls: np.ndarray          # (N,) uint16
    color_valid: np.ndarray  # (N,) bool
    class_valid: np.ndarray  # (N,) bool

    def __post_init__(self):
        xyz = _as_readonly(np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3))
        n = xyz.shape[0]
        hsv = _as_readonly(np.asarray(self.hsv, dtype=np.float64).reshape(n, 3))
        cls = np.ascontiguousarray(np.asarray(self.cls, dtype=np.uint16).reshape(n))
        cls.setflags(write=False)
        cv = np.ascontiguousarray(np.asarray(self.color_valid, dtype=bool).reshape(n))
        cv.setflags(write=False)
        lv = np.ascontiguousarray(np.asarray(self.class_valid, dtype=bool).reshape(n))
        lv.setflags(write=False)
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "hsv", hsv)
        object.__setattr__(self, "cls", cls)
        object.__setattr__(self, "color_valid", cv)
        object.__setattr__(self, "class_valid", lv)

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @staticmethod
    def from_points(timestamp: float, pose: Pose,
                    points: Sequence[EnrichedPoint]) -> "PointCloudFrame":
        n = len(points)
        xyz = np.zeros((n, 3))
        hsv = np.zeros((n, 3))
        cls = np.zeros(n, dtype=np.uint16)
        cv = np.zeros(n, dtype=bool)
        lv = np.zeros(n, dtype=bool)
        for i, p in enumerate(points):
            xyz[i] = (p.x, p.y, p.z)
            hsv[i] = (p.h, p.s, p.v)
            cls[i] = p.c
            cv[i] = p.color_valid
            lv[i] = p.class_valid
        return PointCloudFrame(timestamp, pose, xyz, hsv, cls, cv, lv)

    def point(self, i: int) -> EnrichedPoint:
        return EnrichedPoint(
            x=float(self.xyz[i, 0]), y=float(self.xyz[i, 1]), z=float(self.xyz[i, 2]),
            h=float(self.hsv[i, 0]), s=float(self.hsv[i, 1]), v=float(self.hsv[i, 2]),
            c=int(self.cls[i]),
            color_valid=bool(self.color_valid[i]),
            class_valid=bool(self.class_valid[i]),
        )

    def points(self) -> Iterator[EnrichedPoint]:
        for i in range(len(self)):
            yield self.point(i)

    def world_xyz(self) -> np.ndarray:
        return transform_point(self.pose, self.xyz)

    def select(self, mask: np.ndarray) -> "PointCloudFrame":
        return PointCloudFrame(self.timestamp, self.pose,
                               self.xyz[mask], self.hsv[mask], self.cls[mask],
                               self.color_valid[mask], self.class_valid[mask])


# ---------------------------------------------------------------------------
# Class table
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassEntry:
    id: int
    name: str
    is_dynamic: bool = False
    is_ground: bool = False


@dataclass(frozen=True)
class ClassTable:
    """Semantic class vocabulary with dynamic / ground flags."""

    entries: tuple[ClassEntry, ...] = ()

    def __post_init__(self):
        entries = tuple(self.entries)
        ids = [e.id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate class ids")
        for e in entries:
            if e.id < 0 or e.id > 0xFFFF:
                raise ValueError("class id must fit in 16 bits")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[int]:
        return [e.id for e in self.entries]

    def dynamic_ids(self) -> frozenset[int]:
        return frozenset(e.id for e in self.entries if e.is_dynamic)

    def ground_ids(self) -> frozenset[int]:
        return frozenset(e.id for e in self.entries if e.is_ground)

    def name_of(self, class_id: int) -> str:
        for e in self.entries:
            if e.id == class_id:
                return e.name
        raise KeyError(class_id)

    def index_of(self, class_id: int) -> int:
        """Dense index of a class id in the sorted id list."""
        for i, e in enumerate(sorted(self.entries, key=lambda e: e.id)):
            if e.id == class_id:
                return i
        raise KeyError(class_id)

    def stable_hash(self) -> int:
        """64-bit content hash, stable across processes."""
        import hashlib
        payload = ";".join(
            f"{e.id},{e.name},{int(e.is_dynamic)},{int(e.is_ground)}"
            for e in sorted(self.entries, key=lambda e: e.id)
        ).encode()
        return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")
