"""Slide-level assembly of per-patch detections, and annotated rendering."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .geometry import CellClass, Detection, nms_indices
from .tiling import PatchGrid, PatchSpec

# Box outline colors, by class (RGB).
DEFAULT_PALETTE: Mapping[CellClass, tuple[int, int, int]] = {
    CellClass.MITOTIC: (0, 0, 255),
    CellClass.NON_MITOTIC: (0, 255, 0),
}
DEFAULT_STROKE_WIDTH = 3


@dataclass
class SlideDetections:
    """Final detections for one slide, with the patches each one came from."""

    image_id: str
    detections: list[Detection] = field(default_factory=list)
    sources: list[tuple[PatchSpec, ...]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.detections)

    def above(self, threshold: float) -> list[Detection]:
        return [d for d in self.detections if d.score >= threshold]


def aggregate(
    image_id: str,
    per_patch: Sequence[tuple[PatchSpec, Sequence[Detection]]],
    grid: PatchGrid,
    merge_iou: float = 0.5,
) -> SlideDetections:
    """Merge lifted per-patch detections into one de-duplicated slide set.

    Concatenates everything, then applies class-wise NMS at merge_iou so the
    same cell seen from two patches survives once. Each kept detection records
    the source patch of every duplicate it absorbed.
    """
    width, height = grid.slide_size
    flat: list[Detection] = []
    origins: list[PatchSpec] = []
    for spec, detections in per_patch:
        for det in detections:
            box = det.box
            if box.x_min < 0 or box.y_min < 0 or box.x_max > width or box.y_max > height:
                raise ValueError(
                    f"detection {box.as_xyxy()} outside the {width}x{height} slide; "
                    "lift detections to slide coordinates before aggregating"
                )
            flat.append(det)
            origins.append(spec)
    kept, absorbed = nms_indices(flat, merge_iou)
    result = SlideDetections(image_id=image_id)
    for index in kept:
        result.detections.append(flat[index])
        source = {origins[index]}
        source.update(origins[i] for i in absorbed[index])
        result.sources.append(tuple(sorted(source, key=lambda s: (s.row, s.col))))
    return result


def render(
    slide: np.ndarray,
    detections: SlideDetections | Sequence[Detection],
    display_threshold: float = 0.5,
    palette: Mapping[CellClass, tuple[int, int, int]] = DEFAULT_PALETTE,
    stroke_width: int = DEFAULT_STROKE_WIDTH,
    show_scores: bool = False,
) -> np.ndarray:
    """Draw detection outlines on a copy of the slide.

    Mitotic boxes are blue, non-mitotic green. Only detections at or above the
    display threshold are drawn; pixels outside the strokes (and the optional
    score labels) are untouched.
    """
    if isinstance(detections, SlideDetections):
        detections = detections.detections
    image = Image.fromarray(np.ascontiguousarray(slide))
    draw = ImageDraw.Draw(image)
    height, width = slide.shape[:2]
    for det in detections:
        if det.score < display_threshold:
            continue
        color = palette[det.cell_class]
        # Half-open boxes rasterize to the pixel row/column just inside x_max/y_max.
        x0 = int(round(det.box.x_min))
        y0 = int(round(det.box.y_min))
        x1 = min(int(round(det.box.x_max)) - 1, width - 1)
        y1 = min(int(round(det.box.y_max)) - 1, height - 1)
        if x1 <= x0 or y1 <= y0:
            continue
        draw.rectangle((x0, y0, x1, y1), outline=color, width=stroke_width)
        if show_scores:
            draw.text((x0 + stroke_width + 1, y0 + stroke_width + 1), f"{det.score:.2f}", fill=color)
    return np.asarray(image)
