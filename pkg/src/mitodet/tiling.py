"""Slide tiling: grid planning, patch extraction, label projection, stitching.

Grids are non-overlapping by default; the right/bottom tiles read past the
slide into a padded canvas (white, the background color of stained tissue
slides) so every slide pixel lands in exactly one patch and a stitch of
unmodified patches is bit-identical to the input. An optional overlap turns
the partition into a covering; downstream aggregation de-duplicates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .geometry import BoundingBox, CellClass, Detection, clip_box

WHITE = (255, 255, 255)


@dataclass(frozen=True)
class PatchSpec:
    """One tile's place in a grid: (row, col) index, slide-space origin, size."""

    row: int
    col: int
    origin: tuple[int, int]  # (x, y) in slide pixels
    size: tuple[int, int]  # (w, h)


@dataclass(frozen=True)
class PatchGrid:
    slide_size: tuple[int, int]  # (W, H)
    patch_size: int
    overlap: int = 0
    pad_color: tuple[int, int, int] = WHITE

    def __post_init__(self) -> None:
        width, height = self.slide_size
        if width <= 0 or height <= 0 or self.patch_size <= 0:
            raise ValueError(
                f"slide size {self.slide_size} and patch size {self.patch_size} must be positive"
            )
        if not (0 <= self.overlap < self.patch_size):
            raise ValueError(f"overlap must be in [0, patch_size), got {self.overlap}")

    @property
    def stride(self) -> int:
        return self.patch_size - self.overlap

    @property
    def cols(self) -> int:
        return _axis_count(self.slide_size[0], self.patch_size, self.stride)

    @property
    def rows(self) -> int:
        return _axis_count(self.slide_size[1], self.patch_size, self.stride)

    def spec(self, row: int, col: int) -> PatchSpec:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise ValueError(f"(row, col) = ({row}, {col}) outside {self.rows}x{self.cols} grid")
        return PatchSpec(
            row=row,
            col=col,
            origin=(col * self.stride, row * self.stride),
            size=(self.patch_size, self.patch_size),
        )

    def specs(self) -> Iterator[PatchSpec]:
        """All tiles in row-major order."""
        for row in range(self.rows):
            for col in range(self.cols):
                yield self.spec(row, col)


def _axis_count(extent: int, patch: int, stride: int) -> int:
    if extent <= patch:
        return 1
    return math.ceil((extent - patch) / stride) + 1


def plan_grid(
    width: int,
    height: int,
    patch_size: int,
    overlap: int = 0,
    pad_color: tuple[int, int, int] = WHITE,
) -> PatchGrid:
    """Ceiling-division tiling plan over a W x H slide."""
    return PatchGrid(
        slide_size=(width, height), patch_size=patch_size, overlap=overlap, pad_color=pad_color
    )


def patch_name(image_id: str, spec: PatchSpec) -> str:
    """On-disk naming convention for exported patches."""
    return f"{image_id}_r{spec.row}_c{spec.col}"


def extract_patch(
    slide: np.ndarray, spec: PatchSpec, pad_color: tuple[int, int, int] = WHITE
) -> np.ndarray:
    """Cut one patch; pixels beyond the slide are filled with the pad color."""
    slide_h, slide_w = slide.shape[:2]
    ox, oy = spec.origin
    pw, ph = spec.size
    if ox < 0 or oy < 0 or ox >= slide_w or oy >= slide_h:
        raise ValueError(
            f"patch origin {spec.origin} lies outside the {slide_w}x{slide_h} slide; "
            "spec does not belong to a grid planned for this slide"
        )
    patch = np.empty((ph, pw) + slide.shape[2:], dtype=slide.dtype)
    patch[:, :] = np.asarray(pad_color, dtype=slide.dtype)
    real_w = min(pw, slide_w - ox)
    real_h = min(ph, slide_h - oy)
    patch[:real_h, :real_w] = slide[oy : oy + real_h, ox : ox + real_w]
    return patch


def extract_all(slide: np.ndarray, grid: PatchGrid) -> list[tuple[PatchSpec, np.ndarray]]:
    slide_h, slide_w = slide.shape[:2]
    if (slide_w, slide_h) != grid.slide_size:
        raise ValueError(f"slide is {slide_w}x{slide_h} but grid was planned for {grid.slide_size}")
    return [(spec, extract_patch(slide, spec, grid.pad_color)) for spec in grid.specs()]


def project_annotations(
    boxes: Sequence[tuple[BoundingBox, CellClass]],
    spec: PatchSpec,
    min_visible_fraction: float = 0.5,
) -> list[tuple[BoundingBox, CellClass]]:
    """Slide-space ground truth -> patch-local, keeping sufficiently visible boxes.

    A box is kept iff its clipped area is at least min_visible_fraction of its
    full area; 0 keeps anything that intersects, 1 keeps only fully contained
    boxes.
    """
    if not (0.0 <= min_visible_fraction <= 1.0):
        raise ValueError(f"min_visible_fraction must be in [0, 1], got {min_visible_fraction}")
    ox, oy = spec.origin
    pw, ph = spec.size
    patch_region = BoundingBox(0.0, 0.0, float(pw), float(ph))
    kept = []
    for box, cell_class in boxes:
        local = box.translated(-ox, -oy)
        clipped = clip_box(local, patch_region)
        if clipped is None:
            continue
        if clipped.area >= min_visible_fraction * local.area:
            kept.append((clipped, cell_class))
    return kept


def stitch(patches: Sequence[tuple[PatchSpec, np.ndarray]], grid: PatchGrid) -> np.ndarray:
    """Reassemble a full grid of patches into the slide, cropped to its size.

    Requires a non-overlapping grid with exactly one patch per cell; the
    result is bit-identical to the original slide when patches are unmodified.
    """
    if grid.overlap != 0:
        raise ValueError("stitch requires a non-overlapping grid")
    expected = grid.rows * grid.cols
    seen: set[tuple[int, int]] = set()
    first = patches[0][1] if patches else None
    if first is None:
        raise ValueError("no patches to stitch")
    canvas = np.empty(
        (grid.rows * grid.patch_size, grid.cols * grid.patch_size) + first.shape[2:],
        dtype=first.dtype,
    )
    for spec, patch in patches:
        if patch.shape[:2] != (grid.patch_size, grid.patch_size):
            raise ValueError(
                f"patch at ({spec.row}, {spec.col}) is {patch.shape[:2]}, "
                f"expected {(grid.patch_size, grid.patch_size)}"
            )
        cell = (spec.row, spec.col)
        if cell in seen:
            raise ValueError(f"duplicate patch for grid cell {cell}")
        seen.add(cell)
        ox, oy = spec.origin
        canvas[oy : oy + grid.patch_size, ox : ox + grid.patch_size] = patch
    if len(seen) != expected:
        missing = [
            (r, c) for r in range(grid.rows) for c in range(grid.cols) if (r, c) not in seen
        ]
        raise ValueError(f"missing patches for grid cells {missing[:5]}")
    width, height = grid.slide_size
    return canvas[:height, :width]


def lift_detections(
    detections: Sequence[Detection], spec: PatchSpec, slide_size: tuple[int, int]
) -> list[Detection]:
    """Patch-local detections -> slide coordinates, clipped to slide bounds.

    Detections that fall entirely in the padded region vanish; scores and
    classes are untouched.
    """
    ox, oy = spec.origin
    width, height = slide_size
    bounds = BoundingBox(0.0, 0.0, float(width), float(height))
    lifted = []
    for det in detections:
        moved = det.box.translated(ox, oy)
        clipped = clip_box(moved, bounds)
        if clipped is None:
            continue
        lifted.append(Detection(box=clipped, cell_class=det.cell_class, score=det.score))
    return lifted
