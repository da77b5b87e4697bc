"""Stream orchestration: enrich -> ground removal -> voxel fusion ->
incremental segmentation -> observation snapshots -> description ->
(mode-dependent) localization.

The orchestrator is the single owner of the LocalMap; the map is recentered
on the robot at every frame and flushed at end of stream so every segment
gets a final (most complete) observation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import PipelineConfig
from .core import ClassTable, PointCloudFrame
from .dataio import DatasetManifest
from .descriptor import (Backend, HandcraftedBackend, TrainableBackend,
                         backend_hash, describe)
from .enrichment import remove_ground
from .localize import (LocalizationResult, RansacParams, TargetMap,
                       build_target_map, localize_step)
from .localmap import LocalMap, SegmentObservation


def make_backend(cfg: PipelineConfig, class_table: ClassTable) -> Backend:
    if cfg.descriptor_backend == "handcrafted":
        return HandcraftedBackend(class_table, n_sub=cfg.n_sub)
    return TrainableBackend(class_table, dim=cfg.descriptor_dim,
                            n_sub=cfg.n_sub, seed=cfg.seed)


@dataclass
class RunArtifacts:
    observations: list[SegmentObservation] = field(default_factory=list)
    final_observations: list[SegmentObservation] = field(default_factory=list)
    target_map: Optional[TargetMap] = None
    results: list[LocalizationResult] = field(default_factory=list)
    frame_times: list[float] = field(default_factory=list)
    steps_attempted: int = 0
    log: list[str] = field(default_factory=list)

    @property
    def median_frame_time(self) -> float:
        return float(np.median(self.frame_times)) if self.frame_times else 0.0


def run_pipeline(manifest: DatasetManifest, cfg: PipelineConfig,
                 mode: str = "build-map",
                 target_map: Optional[TargetMap] = None,
                 backend: Optional[Backend] = None) -> RunArtifacts:
    """Stream all frames of a dataset through the pipeline.

    mode: "build-map" (emit a TargetMap), "localize" (match against a loaded
    target_map) or "loop-close" (match against the map built so far in the
    same run). Localization constraints are emitted only; no pose-graph
    optimization happens here.
    """
    if mode not in ("build-map", "localize", "loop-close"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "localize" and target_map is None:
        raise ValueError("localize mode needs a target map")
    class_table = manifest.class_table()
    if backend is None:
        backend = make_backend(cfg, class_table)
    be_hash = backend_hash(backend)
    if mode == "localize" and target_map.backend_hash not in (0, be_hash):
        raise ValueError("target map was built with a different backend")

    local_map = LocalMap(cfg.localmap_params(), cfg.segmentation_params(),
                         class_table)
    art = RunArtifacts()
    live: dict[int, tuple[SegmentObservation, np.ndarray]] = {}
    loop_entries: list[SegmentObservation] = []
    n_frames = len(manifest.frames)
    warmup = int(cfg.warmup_fraction * n_frames)

    def handle_observations(obs_list: Sequence[SegmentObservation]):
        for obs in obs_list:
            desc = describe(backend, obs, seed=cfg.seed)
            art.observations.append(obs)
            if obs.is_final:
                art.final_observations.append(obs)
                live.pop(obs.segment_id, None)
                if mode == "loop-close":
                    loop_entries.append(obs)
            else:
                live[obs.segment_id] = (obs, desc)

    for i in range(n_frames):
        t0 = time.perf_counter()
        frame = manifest.load_frame(i)
        if cfg.ground_removal:
            frame = remove_ground(frame, class_table, cfg.ground_eps).frame
        new_keys = local_map.insert_frame(frame)
        local_map.grow_segments(new_keys)
        obs = local_map.recenter(frame.pose.translation, frame.timestamp)
        handle_observations(obs)

        if i >= warmup:
            if mode == "localize":
                art.steps_attempted += 1
                res = localize_step(list(live.values()), target_map,
                                    cfg.retrieval_k, cfg.ransac_params(),
                                    expected_backend_hash=be_hash,
                                    timestamp=frame.timestamp)
                if res is not None:
                    art.results.append(res)
            elif mode == "loop-close" and len(loop_entries) >= cfg.min_inliers:
                art.steps_attempted += 1
                own_map = build_target_map(loop_entries, backend, seed=cfg.seed,
                                           class_table_hash=class_table.stable_hash())
                res = localize_step(list(live.values()), own_map,
                                    cfg.retrieval_k, cfg.ransac_params(),
                                    timestamp=frame.timestamp)
                if res is not None:
                    art.results.append(res)
        art.frame_times.append(time.perf_counter() - t0)

    final_obs = local_map.flush(manifest.frames[-1].timestamp if n_frames else 0.0)
    handle_observations(final_obs)

    if mode == "build-map":
        art.target_map = build_target_map(
            art.final_observations, backend, seed=cfg.seed,
            class_table_hash=class_table.stable_hash())
    art.log.append(f"frames={n_frames} observations={len(art.observations)} "
                   f"finals={len(art.final_observations)} "
                   f"localizations={len(art.results)}")
    return art
