"""Axis-aligned box arithmetic, IoU, clipping, and non-maximum suppression.

Boxes use a half-open convention: a box spans [x_min, x_max) x [y_min, y_max)
in continuous pixel coordinates, so two boxes that share an edge do not share
any pixels. Coordinates stay real-valued throughout the pipeline;
rasterization happens only at render time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np


class CellClass(IntEnum):
    """Cell categories, with the stable integer ids used in interchange files."""

    MITOTIC = 1
    NON_MITOTIC = 2

    @property
    def label(self) -> str:
        return _CLASS_LABELS[self]


_CLASS_LABELS = {CellClass.MITOTIC: "mitotic", CellClass.NON_MITOTIC: "nonmitotic"}


def class_from_label(label: str) -> CellClass:
    """Map an interchange label ("mitotic" / "nonmitotic") back to a CellClass."""
    for cls, name in _CLASS_LABELS.items():
        if name == label:
            return cls
    raise ValueError(f"unknown cell class label: {label!r}")


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box over [x_min, x_max) x [y_min, y_max).

    Zero-area boxes are rejected at construction; negative coordinates are
    allowed (centroid-derived boxes may hang past an image border until the
    caller clips them).
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise ValueError(f"box must have positive extent, got {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def translated(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def as_xyxy(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def as_xywh(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.width, self.height)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BoundingBox":
        return cls(x, y, x + w, y + h)


@dataclass(frozen=True)
class Detection:
    """A scored, classified box; the currency passed between pipeline stages."""

    box: BoundingBox
    cell_class: CellClass
    score: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score must be in [0, 1], got {self.score}")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes. Symmetric, 0 when disjoint."""
    ix_min = max(a.x_min, b.x_min)
    iy_min = max(a.y_min, b.y_min)
    ix_max = min(a.x_max, b.x_max)
    iy_max = min(a.y_max, b.y_max)
    iw = max(0.0, ix_max - ix_min)
    ih = max(0.0, iy_max - iy_min)
    inter = iw * ih
    if inter <= 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two (N, 4) and (M, 4) arrays of xyxy boxes."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ix_min = np.maximum(boxes_a[:, None, 0], boxes_b[None, :, 0])
    iy_min = np.maximum(boxes_a[:, None, 1], boxes_b[None, :, 1])
    ix_max = np.minimum(boxes_a[:, None, 2], boxes_b[None, :, 2])
    iy_max = np.minimum(boxes_a[:, None, 3], boxes_b[None, :, 3])
    inter = np.clip(ix_max - ix_min, 0.0, None) * np.clip(iy_max - iy_min, 0.0, None)
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=inter > 0)
    return out


def clip_box(box: BoundingBox, region: BoundingBox) -> BoundingBox | None:
    """Intersect `box` with `region`; None when the intersection has zero area."""
    x_min = max(box.x_min, region.x_min)
    y_min = max(box.y_min, region.y_min)
    x_max = min(box.x_max, region.x_max)
    y_max = min(box.y_max, region.y_max)
    if x_min >= x_max or y_min >= y_max:
        return None
    return BoundingBox(x_min, y_min, x_max, y_max)


def centroid_to_box(centroid: tuple[float, float], side: float) -> BoundingBox:
    """Square box of the given side centered on a point label.

    Image-boundary clipping is the caller's policy; corners may go negative.
    """
    cx, cy = centroid
    half = side / 2.0
    return BoundingBox(cx - half, cy - half, cx + half, cy + half)


def nms_indices(
    detections: Sequence[Detection], iou_threshold: float
) -> tuple[list[int], dict[int, list[int]]]:
    """Greedy class-wise suppression, reported as indices into the input.

    Returns (kept, absorbed) where `kept` lists surviving indices in
    descending-score order (ties broken by input order) and `absorbed` maps
    each kept index to the indices it suppressed.
    """
    if not (0.0 < iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    kept: list[int] = []
    absorbed: dict[int, list[int]] = {}
    for idx in order:
        det = detections[idx]
        suppressor = None
        for kept_idx in kept:
            other = detections[kept_idx]
            if other.cell_class != det.cell_class:
                continue
            if iou(det.box, other.box) >= iou_threshold:
                suppressor = kept_idx
                break
        if suppressor is None:
            kept.append(idx)
            absorbed[idx] = []
        else:
            absorbed[suppressor].append(idx)
    return kept, absorbed


def nms(detections: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy class-wise non-maximum suppression.

    Sorts by descending score and keeps a detection iff its IoU with every
    already-kept detection of the same class is below the threshold. A mitotic
    and a non-mitotic box never suppress each other; they are distinct findings.
    """
    kept, _ = nms_indices(detections, iou_threshold)
    return [detections[i] for i in kept]
