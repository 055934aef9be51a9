"""Dataset ingest: centroid CSVs -> classified, box-labeled slide records.

The importer reads one CSV per slide image (rows `x,y,confidence`, no header),
converts each centroid to a square box, classifies it by pathologist
confidence, clips boxes at image borders, drops slides that carry no usable
labels, and splits the survivors into train/validation by whole slide.
"""

from __future__ import annotations

import csv
import logging
import math
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from .formats import Manifest, ManifestAnnotation, ManifestImage
from .geometry import BoundingBox, CellClass, centroid_to_box, clip_box

log = logging.getLogger(__name__)

DEFAULT_BOX_SIDE = 70
DEFAULT_MITOSIS_THRESHOLD = 0.5
# A border-clipped box is kept only if this fraction of its area survives.
DEFAULT_MIN_AREA_FRACTION = 0.5

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")

# Frame dimensions produced by the two scanners the source dataset used.
SCANNER_DIMS = {
    "aperio": (1539, 1376),
    "hamamatsu": (1663, 1485),
}


class Scanner(Enum):
    APERIO = "aperio"
    HAMAMATSU = "hamamatsu"
    UNKNOWN = "unknown"

    @classmethod
    def from_dims(cls, width: int, height: int) -> "Scanner":
        for name, dims in SCANNER_DIMS.items():
            if (width, height) == dims:
                return cls(name)
        return cls.UNKNOWN


class AnnotationFormatError(ValueError):
    """Raised for malformed or out-of-range annotation rows."""


class IngestError(RuntimeError):
    """Raised when a slide record cannot be ingested (e.g. unreadable image)."""


PointLabel = tuple[tuple[float, float], float]  # (centroid, confidence)


@dataclass(frozen=True)
class Annotation:
    """A classified ground-truth label with its derived (clipped) box."""

    centroid: tuple[float, float]
    confidence: float
    cell_class: CellClass
    box: BoundingBox


@dataclass
class SlideRecord:
    """One slide frame plus its labels, raw and (after build_dataset) derived."""

    image_id: str
    image_path: Path
    width: int
    height: int
    points: list[PointLabel] = field(default_factory=list)
    annotations: list[Annotation] = field(default_factory=list)
    scanner: Scanner = Scanner.UNKNOWN


@dataclass
class Dataset:
    train: list[SlideRecord]
    validation: list[SlideRecord]

    @property
    def records(self) -> list[SlideRecord]:
        return list(self.train) + list(self.validation)


def parse_annotations(csv_path: str | Path) -> list[PointLabel]:
    """Read one slide's `x,y,confidence` rows, preserving order.

    Raises AnnotationFormatError naming the file and line for malformed rows
    or confidences outside [0, 1].
    """
    csv_path = Path(csv_path)
    points: list[PointLabel] = []
    with open(csv_path, "r", encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue  # tolerate blank lines
            if len(row) != 3:
                raise AnnotationFormatError(
                    f"{csv_path}:{lineno}: expected 3 fields `x,y,confidence`, got {len(row)}"
                )
            try:
                x, y, confidence = (float(v) for v in row)
            except ValueError as exc:
                raise AnnotationFormatError(f"{csv_path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in (x, y, confidence)):
                raise AnnotationFormatError(f"{csv_path}:{lineno}: non-finite value")
            if not (0.0 <= confidence <= 1.0):
                raise AnnotationFormatError(
                    f"{csv_path}:{lineno}: confidence {confidence} outside [0, 1]"
                )
            points.append(((x, y), confidence))
    return points


def classify_annotation(
    confidence: float, mitosis_threshold: float = DEFAULT_MITOSIS_THRESHOLD
) -> CellClass:
    """Mitotic iff confidence >= threshold, else non-mitotic."""
    if not (0.0 <= confidence <= 1.0) or not (0.0 <= mitosis_threshold <= 1.0):
        raise ValueError("confidence and mitosis_threshold must be in [0, 1]")
    return CellClass.MITOTIC if confidence >= mitosis_threshold else CellClass.NON_MITOTIC


def derive_annotation(
    point: PointLabel,
    image_size: tuple[int, int],
    box_side: float,
    mitosis_threshold: float = DEFAULT_MITOSIS_THRESHOLD,
    min_area_fraction: float = DEFAULT_MIN_AREA_FRACTION,
) -> Annotation | None:
    """Centroid -> square box, clipped to the image; None if too little survives."""
    centroid, confidence = point
    width, height = image_size
    box = centroid_to_box(centroid, box_side)
    clipped = clip_box(box, BoundingBox(0.0, 0.0, float(width), float(height)))
    if clipped is None or clipped.area < min_area_fraction * box.area:
        return None
    return Annotation(
        centroid=centroid,
        confidence=confidence,
        cell_class=classify_annotation(confidence, mitosis_threshold),
        box=clipped,
    )


def build_dataset(
    records: list[SlideRecord],
    box_side: float = DEFAULT_BOX_SIDE,
    split_ratio: float = 0.8,
    seed: int = 0,
    mitosis_threshold: float = DEFAULT_MITOSIS_THRESHOLD,
    min_area_fraction: float = DEFAULT_MIN_AREA_FRACTION,
) -> Dataset:
    """Derive boxes, drop empty slides, and split train/validation by slide.

    The split is deterministic given the seed, independent of input order,
    and sized ceil(N * split_ratio) / remainder.
    """
    if box_side <= 0:
        raise ValueError(f"box_side must be positive, got {box_side}")
    if not (0.0 < split_ratio < 1.0):
        raise ValueError(f"split_ratio must be in (0, 1), got {split_ratio}")

    populated: list[SlideRecord] = []
    dropped_annotations = 0
    for rec in records:
        annotations = []
        for point in rec.points:
            ann = derive_annotation(
                point, (rec.width, rec.height), box_side, mitosis_threshold, min_area_fraction
            )
            if ann is None:
                dropped_annotations += 1
            else:
                annotations.append(ann)
        if annotations:
            populated.append(replace(rec, annotations=annotations))
    if dropped_annotations:
        log.warning(
            "dropped %d border annotations with < %.0f%% of their box inside the image",
            dropped_annotations,
            100 * min_area_fraction,
        )
    if not populated:
        raise IngestError("empty dataset: no slide has a usable annotation")

    # Epsilon guards against float noise in n*ratio landing just above an
    # integer; mathematically ceil is in [1, n] for ratio in (0, 1).
    n = len(populated)
    n_train = min(max(math.ceil(n * split_ratio - 1e-9), 1), n)
    ordered = sorted(populated, key=lambda r: r.image_id)
    random.Random(seed).shuffle(ordered)
    return Dataset(train=ordered[:n_train], validation=ordered[n_train:])


def hflip_sample(
    image: np.ndarray, boxes: list[BoundingBox]
) -> tuple[np.ndarray, list[BoundingBox]]:
    """Mirror an image and its boxes about the vertical center line.

    Exact involution: applying it twice returns the original pixels and boxes.
    """
    width = float(image.shape[1])
    flipped = np.ascontiguousarray(image[:, ::-1])
    flipped_boxes = [
        BoundingBox(width - b.x_max, b.y_min, width - b.x_min, b.y_max) for b in boxes
    ]
    return flipped, flipped_boxes


def load_record(image_path: str | Path, csv_path: str | Path | None) -> SlideRecord:
    """Decode one image's dimensions and parse its annotation CSV, if any."""
    image_path = Path(image_path)
    try:
        with Image.open(image_path) as im:
            width, height = im.size
    except Exception as exc:
        raise IngestError(f"cannot read image for record {image_path.stem!r}: {exc}") from exc
    points = parse_annotations(csv_path) if csv_path is not None else []
    return SlideRecord(
        image_id=image_path.stem,
        image_path=image_path,
        width=width,
        height=height,
        points=points,
        scanner=Scanner.from_dims(width, height),
    )


def discover_records(images_dir: str | Path, annotations_dir: str | Path) -> list[SlideRecord]:
    """Pair image files with same-stem CSVs; images without a CSV get no labels."""
    images_dir = Path(images_dir)
    annotations_dir = Path(annotations_dir)
    records = []
    for image_path in sorted(images_dir.iterdir()):
        if image_path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        csv_path = annotations_dir / f"{image_path.stem}.csv"
        records.append(load_record(image_path, csv_path if csv_path.exists() else None))
    if not records:
        raise IngestError(f"no images found under {images_dir}")
    return records


def dataset_to_manifest(dataset: Dataset) -> Manifest:
    """Serialize a Dataset into the COCO-style manifest wire format."""
    manifest = Manifest()
    for split, recs in (("train", dataset.train), ("validation", dataset.validation)):
        for rec in recs:
            manifest.images.append(
                ManifestImage(
                    id=rec.image_id,
                    path=str(rec.image_path),
                    width=rec.width,
                    height=rec.height,
                    split=split,
                )
            )
            for ann in rec.annotations:
                manifest.annotations.append(
                    ManifestAnnotation(
                        image_id=rec.image_id,
                        bbox=ann.box.as_xywh(),
                        category_id=int(ann.cell_class),
                        confidence=ann.confidence,
                    )
                )
    return manifest
