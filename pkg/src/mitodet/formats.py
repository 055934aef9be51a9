"""On-disk JSON formats shared by the pipeline stages.

Two wire formats live here: the dataset manifest (COCO-style, bbox stored as
[x_min, y_min, width, height] under the half-open convention) and the flat
detection-results array. Writes are canonical (sorted keys, fixed separators)
and atomic so repeated runs produce byte-identical files.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .geometry import BoundingBox, CellClass, Detection

CATEGORIES = (
    {"id": int(CellClass.MITOTIC), "name": CellClass.MITOTIC.label},
    {"id": int(CellClass.NON_MITOTIC), "name": CellClass.NON_MITOTIC.label},
)


def write_json_atomic(path: str | Path, payload: object) -> None:
    """Serialize canonically and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_bytes_atomic(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class ManifestImage:
    id: str
    path: str
    width: int
    height: int
    split: str = "train"


@dataclass
class ManifestAnnotation:
    image_id: str
    bbox: tuple[float, float, float, float]  # x, y, w, h
    category_id: int
    confidence: float

    @property
    def box(self) -> BoundingBox:
        x, y, w, h = self.bbox
        return BoundingBox.from_xywh(x, y, w, h)

    @property
    def cell_class(self) -> CellClass:
        return CellClass(self.category_id)


@dataclass
class Manifest:
    """Dataset manifest: image table plus ground-truth annotations."""

    images: list[ManifestImage] = field(default_factory=list)
    annotations: list[ManifestAnnotation] = field(default_factory=list)

    def image_ids(self) -> list[str]:
        return [img.id for img in self.images]

    def image(self, image_id: str) -> ManifestImage:
        for img in self.images:
            if img.id == image_id:
                return img
        raise KeyError(f"manifest has no image {image_id!r}")

    def annotations_for(self, image_id: str) -> list[ManifestAnnotation]:
        return [a for a in self.annotations if a.image_id == image_id]

    def ground_truth(self, image_id: str) -> list[tuple[BoundingBox, CellClass]]:
        return [(a.box, a.cell_class) for a in self.annotations_for(image_id)]

    def subset(self, split: str) -> "Manifest":
        ids = {img.id for img in self.images if img.split == split}
        return Manifest(
            images=[img for img in self.images if img.id in ids],
            annotations=[a for a in self.annotations if a.image_id in ids],
        )

    def to_json_dict(self) -> dict:
        return {
            "images": [
                {
                    "id": img.id,
                    "path": img.path,
                    "width": img.width,
                    "height": img.height,
                    "split": img.split,
                }
                for img in self.images
            ],
            "annotations": [
                {
                    "image_id": a.image_id,
                    "bbox": list(a.bbox),
                    "category_id": a.category_id,
                    "confidence": a.confidence,
                }
                for a in self.annotations
            ],
            "categories": [dict(c) for c in CATEGORIES],
        }

    @classmethod
    def from_json_dict(cls, payload: Mapping) -> "Manifest":
        images = [
            ManifestImage(
                id=str(img["id"]),
                path=str(img["path"]),
                width=int(img["width"]),
                height=int(img["height"]),
                split=str(img.get("split", "train")),
            )
            for img in payload.get("images", [])
        ]
        annotations = [
            ManifestAnnotation(
                image_id=str(a["image_id"]),
                bbox=tuple(float(v) for v in a["bbox"]),
                category_id=int(a["category_id"]),
                confidence=float(a.get("confidence", 1.0)),
            )
            for a in payload.get("annotations", [])
        ]
        return cls(images=images, annotations=annotations)

    def save(self, path: str | Path) -> None:
        write_json_atomic(path, self.to_json_dict())

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def detections_to_records(per_image: Mapping[str, Sequence[Detection]]) -> list[dict]:
    """Flatten per-image detections into the interchange array."""
    records = []
    for image_id in per_image:
        for det in per_image[image_id]:
            x, y, w, h = det.box.as_xywh()
            records.append(
                {
                    "image_id": image_id,
                    "category_id": int(det.cell_class),
                    "bbox": [x, y, w, h],
                    "score": det.score,
                }
            )
    return records


def records_to_detections(records: Iterable[Mapping]) -> dict[str, list[Detection]]:
    """Group interchange records back into per-image Detection lists."""
    per_image: dict[str, list[Detection]] = {}
    for rec in records:
        x, y, w, h = (float(v) for v in rec["bbox"])
        det = Detection(
            box=BoundingBox.from_xywh(x, y, w, h),
            cell_class=CellClass(int(rec["category_id"])),
            score=float(rec["score"]),
        )
        per_image.setdefault(str(rec["image_id"]), []).append(det)
    return per_image


def save_detections(path: str | Path, per_image: Mapping[str, Sequence[Detection]]) -> None:
    write_json_atomic(path, detections_to_records(per_image))


def load_detections(path: str | Path) -> dict[str, list[Detection]]:
    with open(path, "r", encoding="utf-8") as fh:
        return records_to_detections(json.load(fh))
