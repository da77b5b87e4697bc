"""Back-projection of camera color / class labels onto point clouds, and
local ground-plane removal.

Cameras are plain pinhole models; multi-camera overlap is resolved by the
configured priority order (first valid projection wins). No occlusion test is
performed during back-projection; this is a known limitation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import ClassTable, PointCloudFrame, Pose, transform_point


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: Pose  # camera <- sensor
    name: str = ""

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")


@dataclass(frozen=True)
class LabeledImage:
    """Per-pixel RGB in [0,1] plus per-pixel class ids, (H, W) layout."""

    color: np.ndarray   # (H, W, 3) float
    labels: np.ndarray  # (H, W) uint16

    def __post_init__(self):
        color = np.asarray(self.color, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.uint16)
        if color.ndim != 3 or color.shape[2] != 3:
            raise ValueError("color must be (H, W, 3)")
        if labels.shape != color.shape[:2]:
            raise ValueError("labels shape must match color")
        object.__setattr__(self, "color", color)
        object.__setattr__(self, "labels", labels)

    @property
    def height(self) -> int:
        return self.color.shape[0]

    @property
    def width(self) -> int:
        return self.color.shape[1]


def rgb_to_hsv(r: float, g: float, b: float) -> tuple[float, float, float]:
    """Standard RGB->HSV with h in [0,1); h = 0 when saturation is 0."""
    for comp in (r, g, b):
        if not 0.0 <= comp <= 1.0:
            raise ValueError("RGB components must lie in [0, 1]")
    mx = max(r, g, b)
    mn = min(r, g, b)
    v = mx
    delta = mx - mn
    if delta == 0.0:
        return 0.0, 0.0, v
    s = delta / mx
    if mx == r:
        h = ((g - b) / delta) % 6.0
    elif mx == g:
        h = (b - r) / delta + 2.0
    else:
        h = (r - g) / delta + 4.0
    h /= 6.0
    if h >= 1.0:
        h -= 1.0
    return h, s, v


def rgb_to_hsv_array(rgb: np.ndarray) -> np.ndarray:
    """Vectorized rgb_to_hsv over an (N, 3) array."""
    rgb = np.asarray(rgb, dtype=np.float64)
    mx = rgb.max(axis=1)
    mn = rgb.min(axis=1)
    delta = mx - mn
    v = mx
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    h = np.zeros(len(rgb))
    r, g, b = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    safe = np.where(delta > 0, delta, 1.0)
    m = (delta > 0) & (mx == r)
    h[m] = ((g[m] - b[m]) / safe[m]) % 6.0
    m = (delta > 0) & (mx == g) & (mx != r)
    h[m] = (b[m] - r[m]) / safe[m] + 2.0
    m = (delta > 0) & (mx == b) & (mx != r) & (mx != g)
    h[m] = (r[m] - g[m]) / safe[m] + 4.0
    h = (h / 6.0) % 1.0
    return np.stack([h, s, v], axis=1)


def hsv_to_rgb(h: float, s: float, v: float) -> tuple[float, float, float]:
    """Inverse conversion, used for round-trip checks and color noise."""
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - f * s)
    t = v * (1.0 - (1.0 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def project_point(cam: PinholeCamera, pt_sensor: np.ndarray) -> Optional[tuple[float, float]]:
    """Project a sensor-frame point; None if behind the camera or off-image."""
    p = transform_point(cam.extrinsic, np.asarray(pt_sensor, dtype=np.float64))
    if p[2] <= 0.0:
        return None
    u = cam.fx * p[0] / p[2] + cam.cx
    v = cam.fy * p[1] / p[2] + cam.cy
    if not (0.0 <= u < cam.width and 0.0 <= v < cam.height):
        return None
    return u, v


def enrich_cloud(frame: PointCloudFrame,
                 cameras: Sequence[tuple[PinholeCamera, LabeledImage]]) -> PointCloudFrame:
    """Assign h,s,v,c to each point from the first camera that sees it.

    Geometry and point count are never changed; points no camera sees keep
    color_valid = class_valid = False.
    """
    n = len(frame)
    hsv = np.array(frame.hsv)
    cls = np.array(frame.cls)
    cv = np.zeros(n, dtype=bool)
    lv = np.zeros(n, dtype=bool)
    unassigned = np.ones(n, dtype=bool)
    for cam, img in cameras:
        if img.width != cam.width or img.height != cam.height:
            raise ValueError("image dimensions do not match camera")
        if not unassigned.any():
            break
        idx = np.nonzero(unassigned)[0]
        p = transform_point(cam.extrinsic, frame.xyz[idx])
        z = p[:, 2]
        front = z > 0
        zf = np.where(front, z, 1.0)
        u = cam.fx * p[:, 0] / zf + cam.cx
        v = cam.fy * p[:, 1] / zf + cam.cy
        hit = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        if not hit.any():
            continue
        sel = idx[hit]
        ui = u[hit].astype(np.intp)
        vi = v[hit].astype(np.intp)
        hsv[sel] = rgb_to_hsv_array(img.color[vi, ui])
        cls[sel] = img.labels[vi, ui]
        cv[sel] = True
        lv[sel] = True
        unassigned[sel] = False
    return PointCloudFrame(frame.timestamp, frame.pose, frame.xyz, hsv, cls, cv, lv)


@dataclass(frozen=True)
class GroundRemovalResult:
    frame: PointCloudFrame
    plane: Optional[np.ndarray]  # (a, b, c) of z = a x + b y + c, None if skipped
    warning: Optional[str] = None


def remove_ground(frame: PointCloudFrame, classes: ClassTable,
                  proximity_eps: float) -> GroundRemovalResult:
    """Fit a least-squares plane to ground-labeled points, drop those points
    and anything within proximity_eps of the plane.

    Fewer than 3 ground points, or degenerate (collinear) geometry, passes the
    frame through unchanged with a warning.
    """
    ground = classes.ground_ids()
    gmask = frame.class_valid & np.isin(frame.cls, list(ground) or [-1])
    if gmask.sum() < 3:
        return GroundRemovalResult(frame, None, "fewer than 3 ground points")
    gp = frame.xyz[gmask]
    a = np.column_stack([gp[:, 0], gp[:, 1], np.ones(len(gp))])
    sol, _, rank, _ = np.linalg.lstsq(a, gp[:, 2], rcond=None)
    if rank < 3:
        return GroundRemovalResult(frame, None, "degenerate ground geometry")
    pa, pb, pc = sol
    dist = np.abs(pa * frame.xyz[:, 0] + pb * frame.xyz[:, 1] + pc - frame.xyz[:, 2])
    dist /= np.sqrt(pa * pa + pb * pb + 1.0)
    keep = ~gmask & (dist >= proximity_eps)
    return GroundRemovalResult(frame.select(keep), np.array([pa, pb, pc]))
