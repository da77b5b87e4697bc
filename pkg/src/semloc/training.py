"""Training data assembly from ground-truth object associations.

Descriptor training never consumes pipeline segmentation output; it uses the
generator's ground-truth object ids, either by accumulating a rendered
dataset's sidecar-labeled points per object, or by sampling a standalone
segment library directly from primitive surfaces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import ClassTable
from .dataio import DatasetManifest
from .descriptor import AugmentParams, TrainingTriplet, augment
from .localmap import SegmentObservation


def _voxelize(xyz, hsv, cls, voxel_size: float):
    """Collapse points to per-voxel means / majority labels (matches the
    local map's fused representation closely enough for training)."""
    keys = np.floor(xyz / voxel_size).astype(np.int64)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    m = len(uniq)
    out_xyz = np.zeros((m, 3))
    out_hsv = np.zeros((m, 3))
    out_cls = np.zeros(m, dtype=np.uint16)
    counts = np.bincount(inv, minlength=m).astype(float)
    for d in range(3):
        out_xyz[:, d] = np.bincount(inv, weights=xyz[:, d], minlength=m) / counts
    ang = 2.0 * np.pi * hsv[:, 0]
    mc = np.bincount(inv, weights=np.cos(ang), minlength=m)
    ms = np.bincount(inv, weights=np.sin(ang), minlength=m)
    h = (np.arctan2(ms, mc) / (2.0 * np.pi)) % 1.0
    out_hsv[:, 0] = np.where(h >= 1.0, 0.0, h)
    out_hsv[:, 1] = np.bincount(inv, weights=hsv[:, 1], minlength=m) / counts
    out_hsv[:, 2] = np.bincount(inv, weights=hsv[:, 2], minlength=m) / counts
    for i in range(m):
        vals, cnts = np.unique(cls[inv == i], return_counts=True)
        out_cls[i] = vals[np.lexsort((vals, -cnts))[0]]
    return out_xyz, out_hsv, out_cls


def _make_observation(obj_id: int, obs_index: int, timestamp: float,
                      xyz, hsv, cls, is_final: bool) -> SegmentObservation:
    n = len(xyz)
    return SegmentObservation(
        segment_id=obj_id, obs_index=obs_index, timestamp=timestamp,
        xyz=xyz, hsv=hsv, cls=cls,
        color_valid=np.ones(n, dtype=bool), class_valid=np.ones(n, dtype=bool),
        centroid=xyz.mean(axis=0), is_final=is_final)


def ground_truth_observations(manifest: DatasetManifest, voxel_size: float = 0.1,
                              snapshot_every: int = 5, min_points: int = 20
                              ) -> dict[int, list[SegmentObservation]]:
    """Accumulate sidecar-labeled points per ground-truth object and snapshot
    growing observations; the last snapshot per object is marked final."""
    acc: dict[int, list[np.ndarray]] = {}
    out: dict[int, list[SegmentObservation]] = {}
    last_counts: dict[int, int] = {}

    def snapshot(timestamp: float, final: bool):
        for obj, chunks in acc.items():
            data = np.concatenate(chunks, axis=0)
            xyz, hsv, cls = _voxelize(data[:, :3], data[:, 3:6],
                                      data[:, 6].astype(np.uint16), voxel_size)
            if len(xyz) < min_points:
                continue
            if not final and last_counts.get(obj, 0) >= len(xyz):
                continue
            last_counts[obj] = len(xyz)
            obs_list = out.setdefault(obj, [])
            obs_list.append(_make_observation(obj, len(obs_list), timestamp,
                                              xyz, hsv, cls, final))

    for i in range(len(manifest.frames)):
        frame = manifest.load_frame(i)
        ids = manifest.load_object_ids(i)
        if ids is None:
            raise ValueError("dataset has no ground-truth sidecars")
        world = frame.world_xyz()
        for obj in np.unique(ids):
            m = ids == obj
            chunk = np.concatenate([world[m], frame.hsv[m],
                                    frame.cls[m, None].astype(np.float64)], axis=1)
            acc.setdefault(int(obj), []).append(chunk)
        if (i + 1) % snapshot_every == 0:
            snapshot(frame.timestamp, final=False)
    if manifest.frames:
        snapshot(manifest.frames[-1].timestamp, final=True)
    # only the final snapshot keeps is_final; earlier entries were emitted
    # with final=False already
    return out


def synthesize_segment_library(n_segments: int, class_table: ClassTable,
                               seed: int = 0, points_per_segment: int = 400
                               ) -> dict[int, SegmentObservation]:
    """Standalone library of complete per-object observations sampled from
    random primitive surfaces, for descriptor experiments at desk scale."""
    rng = np.random.default_rng(seed)
    class_ids = class_table.ids() or [0]
    library: dict[int, SegmentObservation] = {}
    for obj in range(n_segments):
        kind = rng.integers(3)
        size = rng.uniform(0.5, 3.0, size=3)
        n = points_per_segment
        if kind == 0:          # box surface
            face = rng.integers(3, size=n)
            side = rng.choice([-0.5, 0.5], size=n)
            xyz = rng.uniform(-0.5, 0.5, size=(n, 3))
            xyz[np.arange(n), face] = side
            xyz *= size
        elif kind == 1:        # cylinder surface
            ang = rng.uniform(0, 2 * np.pi, size=n)
            z = rng.uniform(-0.5, 0.5, size=n)
            r = size[0] / 2
            xyz = np.stack([r * np.cos(ang), r * np.sin(ang), z * size[2]], axis=1)
        else:                  # planar patch
            xyz = rng.uniform(-0.5, 0.5, size=(n, 3))
            xyz[:, 2] = 0.0
            xyz *= size
        center = rng.uniform(-50, 50, size=3)
        xyz = xyz + center
        base_h = rng.uniform(0, 1)
        hsv = np.stack([
            (base_h + rng.normal(0, 0.02, size=n)) % 1.0,
            np.clip(rng.uniform(0.4, 1.0) + rng.normal(0, 0.05, size=n), 0, 1),
            np.clip(rng.uniform(0.2, 1.0) + rng.normal(0, 0.05, size=n), 0, 1),
        ], axis=1)
        cls = np.full(n, rng.choice(class_ids), dtype=np.uint16)
        library[obj] = _make_observation(obj, 0, 0.0, xyz, hsv, cls, True)
    return library


def make_triplets(observations: dict[int, list[SegmentObservation]],
                  n_triplets: int, seed: int = 0) -> list[TrainingTriplet]:
    """Random (anchor, positive, negative) triples: anchor/positive share a
    ground-truth id, the negative comes from a different one."""
    rng = np.random.default_rng(seed)
    eligible = {k: v for k, v in observations.items() if len(v) >= 1}
    ids = sorted(eligible)
    if len(ids) < 2:
        raise ValueError("need observations from at least 2 objects")
    triplets = []
    for _ in range(n_triplets):
        a_id, n_id = rng.choice(ids, size=2, replace=False)
        a_obs = eligible[a_id]
        anchor = a_obs[int(rng.integers(len(a_obs)))]
        positive = a_obs[int(rng.integers(len(a_obs)))]
        n_obs = eligible[n_id]
        negative = n_obs[int(rng.integers(len(n_obs)))]
        triplets.append(TrainingTriplet(anchor, positive, negative,
                                        anchor_truth_id=int(a_id),
                                        negative_truth_id=int(n_id)))
    return triplets
