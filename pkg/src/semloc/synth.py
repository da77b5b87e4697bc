"""Synthetic scene generation with ground-truth object associations.

A scene is a set of solid primitives (box, cylinder, rectangle "plane") with
class labels and base HSV colors, scanned by a spinning range sensor (270
degree horizontal field of view by default) moving along a waypoint
trajectory. Each emitted point carries its true (noised) color and class; the
ground-truth object id per point goes to a sidecar so the main pipeline
cannot accidentally consume it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import Pose, PointCloudFrame, quat_from_axis_angle, transform_point


@dataclass(frozen=True)
class Primitive:
    """Solid with pose (world <- local), local-frame dimensions and label."""

    shape: str                 # "box" | "cylinder" | "plane"
    pose: Pose
    dimensions: tuple[float, ...]  # box: (sx, sy, sz); cylinder: (radius, height); plane: (sx, sy)
    class_id: int
    base_hsv: tuple[float, float, float] = (0.0, 0.0, 0.5)
    color_noise: float = 0.0

    def __post_init__(self):
        if self.shape not in ("box", "cylinder", "plane"):
            raise ValueError(f"unknown primitive shape {self.shape!r}")
        if any(d <= 0 for d in self.dimensions):
            raise ValueError("primitive dimensions must be positive")


@dataclass(frozen=True)
class SensorModel:
    horizontal_fov: float = 270.0   # degrees
    vertical_fov: float = 30.0      # degrees
    horizontal_step: float = 1.0    # degrees
    vertical_step: float = 2.0      # degrees
    max_range: float = 50.0
    range_noise: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple[Primitive, ...]
    waypoints: tuple[tuple[float, float, float], ...]
    speed: float = 1.0              # m/s along the waypoint polyline
    frame_rate: float = 5.0         # Hz
    sensor: SensorModel = field(default_factory=SensorModel)
    label_noise_prob: float = 0.0
    class_ids: tuple[int, ...] = ()  # vocabulary for label corruption
    seed: int = 0

    def __post_init__(self):
        if len(self.waypoints) < 2:
            raise ValueError("trajectory needs at least 2 waypoints")


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------

def _ray_box(origins, dirs, pose: Pose, dims):
    """Slab intersection with a local-frame axis-aligned box; returns t or inf."""
    inv = pose.inverse()
    r = inv.rotation_matrix()
    o = origins @ r.T + inv.translation
    d = dirs @ r.T
    half = np.asarray(dims) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmax > 0)
    t = np.where(tmin > 0, tmin, tmax)
    return np.where(hit & (t > 1e-9), t, np.inf)


def _ray_cylinder(origins, dirs, pose: Pose, dims):
    radius, height = dims
    inv = pose.inverse()
    r = inv.rotation_matrix()
    o = origins @ r.T + inv.translation
    d = dirs @ r.T
    # lateral surface: quadratic in the xy components
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2.0 * (o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1])
    c = o[:, 0] ** 2 + o[:, 1] ** 2 - radius ** 2
    disc = b * b - 4 * a * c
    t_side = np.full(len(o), np.inf)
    ok = (disc >= 0) & (a > 1e-12)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(invalid="ignore"):
        for sign in (-1.0, 1.0):
            t = np.where(ok, (-b + sign * sq) / (2 * np.where(ok, a, 1.0)), np.inf)
            z = o[:, 2] + t * d[:, 2]
            valid = ok & (t > 1e-9) & (np.abs(z) <= height / 2.0)
            t_side = np.where(valid & (t < t_side), t, t_side)
        # caps
        t_cap = np.full(len(o), np.inf)
        dz = d[:, 2]
        nz = np.abs(dz) > 1e-12
        for zc in (-height / 2.0, height / 2.0):
            t = np.where(nz, (zc - o[:, 2]) / np.where(nz, dz, 1.0), np.inf)
            x = o[:, 0] + t * d[:, 0]
            y = o[:, 1] + t * d[:, 1]
            valid = nz & (t > 1e-9) & (x * x + y * y <= radius ** 2)
            t_cap = np.where(valid & (t < t_cap), t, t_cap)
    return np.minimum(t_side, t_cap)


def _ray_plane(origins, dirs, pose: Pose, dims):
    sx, sy = dims
    inv = pose.inverse()
    r = inv.rotation_matrix()
    o = origins @ r.T + inv.translation
    d = dirs @ r.T
    dz = d[:, 2]
    nz = np.abs(dz) > 1e-12
    t = np.where(nz, -o[:, 2] / np.where(nz, dz, 1.0), np.inf)
    with np.errstate(invalid="ignore"):
        x = o[:, 0] + t * d[:, 0]
        y = o[:, 1] + t * d[:, 1]
    valid = nz & (t > 1e-9) & (np.abs(x) <= sx / 2.0) & (np.abs(y) <= sy / 2.0)
    return np.where(valid, t, np.inf)


_INTERSECTORS = {"box": _ray_box, "cylinder": _ray_cylinder, "plane": _ray_plane}


def _ray_directions(sensor: SensorModel) -> np.ndarray:
    az = np.deg2rad(np.arange(-sensor.horizontal_fov / 2.0,
                              sensor.horizontal_fov / 2.0 + 1e-9,
                              sensor.horizontal_step))
    el = np.deg2rad(np.arange(-sensor.vertical_fov / 2.0,
                              sensor.vertical_fov / 2.0 + 1e-9,
                              sensor.vertical_step))
    azg, elg = np.meshgrid(az, el, indexing="ij")
    azg = azg.ravel()
    elg = elg.ravel()
    return np.stack([np.cos(elg) * np.cos(azg),
                     np.cos(elg) * np.sin(azg),
                     np.sin(elg)], axis=1)


def trajectory_poses(spec: SceneSpec) -> list[tuple[float, Pose]]:
    """Timestamped poses sampled along the waypoint polyline at frame_rate,
    yaw following the direction of travel."""
    wps = np.asarray(spec.waypoints, dtype=np.float64)
    seg_vec = np.diff(wps, axis=0)
    seg_len = np.linalg.norm(seg_vec, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    dt = 1.0 / spec.frame_rate
    n_frames = max(int(total / spec.speed / dt) + 1, 2)
    poses = []
    for i in range(n_frames):
        t = i * dt
        s = min(t * spec.speed, total)
        j = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg_len) - 1)
        alpha = (s - cum[j]) / seg_len[j] if seg_len[j] > 0 else 0.0
        pos = wps[j] + alpha * seg_vec[j]
        yaw = math.atan2(seg_vec[j][1], seg_vec[j][0])
        poses.append((t, Pose(pos, quat_from_axis_angle([0, 0, 1], yaw))))
    return poses


@dataclass(frozen=True)
class SyntheticFrame:
    frame: PointCloudFrame
    object_ids: np.ndarray  # (N,) int, ground-truth primitive index


def render_frame(spec: SceneSpec, pose: Pose, timestamp: float,
                 rng: np.random.Generator) -> SyntheticFrame:
    """Cast the sensor ray grid from one pose and return the enriched frame
    (sensor-frame points) with its ground-truth id sidecar."""
    dirs_sensor = _ray_directions(spec.sensor)
    r = pose.rotation_matrix()
    dirs_world = dirs_sensor @ r.T
    origins = np.broadcast_to(pose.translation, dirs_world.shape)
    best_t = np.full(len(dirs_world), np.inf)
    best_id = np.full(len(dirs_world), -1, dtype=np.int64)
    for idx, prim in enumerate(spec.primitives):
        t = _INTERSECTORS[prim.shape](origins, dirs_world, prim.pose,
                                      prim.dimensions)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_id[closer] = idx
    hit = np.isfinite(best_t) & (best_t <= spec.sensor.max_range)
    t = best_t[hit]
    if spec.sensor.range_noise > 0:
        t = t + rng.normal(0.0, spec.sensor.range_noise, size=len(t))
    pts_sensor = dirs_sensor[hit] * t[:, None]
    obj = best_id[hit]
    n = len(obj)
    hsv = np.zeros((n, 3))
    cls = np.zeros(n, dtype=np.uint16)
    for idx, prim in enumerate(spec.primitives):
        m = obj == idx
        if not m.any():
            continue
        base = np.array(prim.base_hsv)
        vals = np.broadcast_to(base, (int(m.sum()), 3)).copy()
        if prim.color_noise > 0:
            vals = vals + rng.normal(0.0, prim.color_noise, size=vals.shape)
        vals[:, 0] %= 1.0
        vals[:, 0] = np.where(vals[:, 0] >= 1.0, 0.0, vals[:, 0])
        vals[:, 1:] = np.clip(vals[:, 1:], 0.0, 1.0)
        hsv[m] = vals
        cls[m] = prim.class_id
    if spec.label_noise_prob > 0 and spec.class_ids:
        flip = rng.random(n) < spec.label_noise_prob
        cls[flip] = rng.choice(spec.class_ids, size=int(flip.sum()))
    valid = np.ones(n, dtype=bool)
    frame = PointCloudFrame(timestamp, pose, pts_sensor, hsv, cls, valid, valid)
    return SyntheticFrame(frame, obj)


def render_scene(spec: SceneSpec) -> list[SyntheticFrame]:
    """All frames of a scene, deterministic for a fixed spec seed."""
    rng = np.random.default_rng(spec.seed)
    return [render_frame(spec, pose, t, rng)
            for t, pose in trajectory_poses(spec)]


def scene_spec_from_json(path) -> SceneSpec:
    """Load a SceneSpec from a JSON file (shape, position, yaw, dimensions,
    class_id, base_hsv, color_noise per primitive)."""
    import json

    with open(path) as f:
        raw = json.load(f)
    prims = []
    for p in raw.get("primitives", []):
        yaw = float(p.get("yaw", 0.0))
        pose = Pose(np.asarray(p.get("position", [0, 0, 0]), dtype=np.float64),
                    quat_from_axis_angle([0, 0, 1], yaw))
        prims.append(Primitive(
            shape=p["shape"], pose=pose,
            dimensions=tuple(float(d) for d in p["dimensions"]),
            class_id=int(p["class_id"]),
            base_hsv=tuple(p.get("base_hsv", (0.0, 0.0, 0.5))),
            color_noise=float(p.get("color_noise", 0.0))))
    sensor = SensorModel(**raw.get("sensor", {}))
    return SceneSpec(
        primitives=tuple(prims),
        waypoints=tuple(tuple(w) for w in raw["waypoints"]),
        speed=float(raw.get("speed", 1.0)),
        frame_rate=float(raw.get("frame_rate", 5.0)),
        sensor=sensor,
        label_noise_prob=float(raw.get("label_noise_prob", 0.0)),
        class_ids=tuple(int(c) for c in raw.get("class_ids", ())),
        seed=int(raw.get("seed", 0)))
