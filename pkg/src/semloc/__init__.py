"""Segment-based semantic localization on enriched point clouds."""

from .core import (ClassEntry, ClassTable, EnrichedPoint, PointCloudFrame,
                   Pose, compose, hue_difference, transform_point)
from .localmap import (LocalMap, LocalMapParams, SegmentationParams,
                       SegmentObservation, f_c, f_h, majority_class,
                       pair_distance)

__all__ = [
    "ClassEntry", "ClassTable", "EnrichedPoint", "PointCloudFrame", "Pose",
    "compose", "hue_difference", "transform_point",
    "LocalMap", "LocalMapParams", "SegmentationParams", "SegmentObservation",
    "f_c", "f_h", "majority_class", "pair_distance",
]

__version__ = "0.1.0"
