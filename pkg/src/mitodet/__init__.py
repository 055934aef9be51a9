"""Whole-slide mitotic cell detection pipeline.

Stages: annotation ingest -> stain normalization -> tiling -> per-patch
detection -> slide-level aggregation and rendering -> COCO-protocol scoring.
"""

from .geometry import BoundingBox, CellClass, Detection, centroid_to_box, clip_box, iou, nms

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "CellClass",
    "Detection",
    "centroid_to_box",
    "clip_box",
    "iou",
    "nms",
    "__version__",
]
