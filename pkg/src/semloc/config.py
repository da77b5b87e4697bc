"""Flat `key = value` pipeline configuration with typed validation.

Every key has a shipped default matching the reference parameter set
(d_segment 0.3, t_h 0.1, p_h 0.05, p_c 0.15, margin 0.4, n_sub 2048,
retrieval_k 16, max_centroid_dist 0.4, min_inliers 6, iou_threshold 0.33).
Unknown keys are rejected on load.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .descriptor import AugmentParams
from .localize import RansacParams
from .localmap import LocalMapParams, SegmentationParams


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    # segmentation
    d_segment: float = 0.3
    t_h: float = 0.1
    p_h: float = 0.05
    p_c: float = 0.15
    min_segment_points: int = 100
    # local map
    radius_R: float = 50.0
    voxel_size: float = 0.1
    filter_dynamic: bool = True
    # ground removal
    ground_removal: bool = False
    ground_eps: float = 0.1
    # descriptor
    descriptor_backend: str = "handcrafted"  # or "trainable"
    descriptor_dim: int = 64
    n_sub: int = 2048
    # training
    margin: float = 0.4
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 8
    aug_rotation_prob: float = 0.0
    aug_jitter_sigma: float = 0.0
    aug_scale_sigma: float = 0.0
    aug_dropout_ratio: float = 0.0
    aug_section_removal_prob: float = 0.0
    aug_hue_shift_sigma: float = 0.0
    aug_label_noise_prob: float = 0.0
    # localization
    retrieval_k: int = 16
    min_inliers: int = 6
    max_centroid_dist: float = 0.4
    ransac_iterations: int = 2000
    warmup_fraction: float = 0.2
    # evaluation
    iou_samples: int = 20000
    iou_threshold: float = 0.33
    pair_gate: float = 2.0
    # global
    seed: int = 0
    threads: int = 1

    # -- derived parameter bundles -----------------------------------------

    def segmentation_params(self) -> SegmentationParams:
        return SegmentationParams(d_segment=self.d_segment, t_h=self.t_h,
                                  p_h=self.p_h, p_c=self.p_c,
                                  min_segment_points=self.min_segment_points)

    def localmap_params(self) -> LocalMapParams:
        return LocalMapParams(radius_R=self.radius_R,
                              voxel_size=self.voxel_size,
                              filter_dynamic=self.filter_dynamic)

    def ransac_params(self) -> RansacParams:
        return RansacParams(min_inliers=self.min_inliers,
                            max_centroid_dist=self.max_centroid_dist,
                            max_iterations=self.ransac_iterations,
                            seed=self.seed)

    def augment_params(self, class_ids: tuple[int, ...] = ()) -> AugmentParams:
        return AugmentParams(rotation_prob=self.aug_rotation_prob,
                             jitter_sigma=self.aug_jitter_sigma,
                             scale_sigma=self.aug_scale_sigma,
                             dropout_ratio=self.aug_dropout_ratio,
                             section_removal_prob=self.aug_section_removal_prob,
                             hue_shift_sigma=self.aug_hue_shift_sigma,
                             label_noise_prob=self.aug_label_noise_prob,
                             class_ids=class_ids)


_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _parse_value(key: str, raw: str):
    ftype = _FIELD_TYPES[key]
    raw = raw.strip()
    if ftype == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if ftype == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
    if ftype == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}")
    return raw


def load_config(path) -> PipelineConfig:
    cfg = PipelineConfig()
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{line_no}: unknown key {key!r}")
            setattr(cfg, key, _parse_value(key, raw))
    validate_config(cfg)
    return cfg


def save_config(cfg: PipelineConfig, path) -> None:
    with open(path, "w") as f:
        for field_ in fields(PipelineConfig):
            value = getattr(cfg, field_.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            f.write(f"{field_.name} = {value}\n")


def validate_config(cfg: PipelineConfig) -> None:
    if cfg.descriptor_backend not in ("handcrafted", "trainable"):
        raise ConfigError(f"unknown descriptor backend {cfg.descriptor_backend!r}")
    if cfg.n_sub <= 0 or cfg.descriptor_dim <= 0:
        raise ConfigError("n_sub and descriptor_dim must be positive")
    if not 0.0 <= cfg.warmup_fraction < 1.0:
        raise ConfigError("warmup_fraction must lie in [0, 1)")
    # constructor invariants of the parameter bundles
    cfg.segmentation_params()
    cfg.localmap_params()
    cfg.ransac_params()
