"""Dataset plumbing: manifest-backed patch loading and synthetic desk-scale sets.

The manifest format is the pipeline's interchange contract: images carry
id/path/size/split, annotations carry [x, y, w, h] boxes (half-open) with
category ids 1 (mitotic) and 2 (nonmitotic).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw
from torch.utils.data import Dataset

CLASS_NAMES = {1: "mitotic", 2: "nonmitotic"}


@dataclass
class PatchEntry:
    image_id: str
    path: Path
    width: int
    height: int
    boxes: list[tuple[float, float, float, float]]  # xyxy
    labels: list[int]


def read_manifest(manifest_path: str | Path, split: str | None = None) -> list[PatchEntry]:
    """Parse a manifest JSON into per-image entries, optionally one split only."""
    manifest_path = Path(manifest_path)
    payload = json.loads(manifest_path.read_text(encoding="utf-8"))
    by_image: dict[str, PatchEntry] = {}
    for img in payload["images"]:
        if split is not None and img.get("split", "train") != split:
            continue
        path = Path(img["path"])
        if not path.is_absolute():
            path = manifest_path.parent / path
        by_image[str(img["id"])] = PatchEntry(
            image_id=str(img["id"]),
            path=path,
            width=int(img["width"]),
            height=int(img["height"]),
            boxes=[],
            labels=[],
        )
    for ann in payload["annotations"]:
        entry = by_image.get(str(ann["image_id"]))
        if entry is None:
            continue
        x, y, w, h = (float(v) for v in ann["bbox"])
        entry.boxes.append((x, y, x + w, y + h))
        entry.labels.append(int(ann["category_id"]))
    return list(by_image.values())


def hflip(image: torch.Tensor, boxes: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mirror a CHW image tensor and xyxy boxes about the vertical center."""
    width = image.shape[-1]
    flipped = image.flip(-1)
    if boxes.numel():
        boxes = boxes.clone()
        x_min = width - boxes[:, 2]
        x_max = width - boxes[:, 0]
        boxes[:, 0] = x_min
        boxes[:, 2] = x_max
    return flipped, boxes


class PatchDataset(Dataset):
    """Patches plus detection targets in torchvision's (image, target) shape."""

    def __init__(self, entries: list[PatchEntry], augment: bool = False, seed: int = 0):
        self.entries = entries
        self.augment = augment
        self._rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int):
        entry = self.entries[index]
        with Image.open(entry.path) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        image = torch.from_numpy(pixels.transpose(2, 0, 1))
        boxes = torch.tensor(entry.boxes, dtype=torch.float32).reshape(-1, 4)
        labels = torch.tensor(entry.labels, dtype=torch.int64)
        if self.augment and self._rng.random() < 0.5:
            image, boxes = hflip(image, boxes)
        target = {"boxes": boxes, "labels": labels}
        return image, target


def collate(batch):
    return tuple(zip(*batch))


# ---------------------------------------------------------------------------
# Synthetic desk-scale data
# ---------------------------------------------------------------------------

BACKGROUND = (232, 209, 223)
# mitotic figures render dark and compact; non-mitotic nuclei lighter and rounder
STYLES = {
    1: {"fill": (58, 36, 114), "radius": (14, 20)},
    2: {"fill": (158, 112, 134), "radius": (10, 16)},
}


def synthesize_patch_set(
    root: Path,
    n_patches: int = 24,
    patch_size: int = 256,
    seed: int = 0,
    validation_fraction: float = 0.25,
) -> Path:
    """Write a small labeled patch set + manifest; returns the manifest path.

    Cells sit on a coarse lattice so boxes never overlap, which keeps the
    detection task learnable in a couple of epochs.
    """
    root = Path(root)
    (root / "patches").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    images = []
    annotations = []
    n_validation = max(1, int(round(n_patches * validation_fraction)))
    lattice = [(64, 64), (192, 64), (64, 192), (192, 192)]
    for index in range(n_patches):
        image_id = f"patch_{index:03d}"
        split = "validation" if index < n_validation else "train"
        image = Image.new("RGB", (patch_size, patch_size), BACKGROUND)
        draw = ImageDraw.Draw(image)
        count = int(rng.integers(1, len(lattice) + 1))
        for slot in rng.choice(len(lattice), size=count, replace=False):
            cx, cy = lattice[slot]
            cx += float(rng.uniform(-12, 12))
            cy += float(rng.uniform(-12, 12))
            label = int(rng.integers(1, 3))
            lo, hi = STYLES[label]["radius"]
            rx = float(rng.uniform(lo, hi))
            ry = float(rng.uniform(lo, hi))
            draw.ellipse((cx - rx, cy - ry, cx + rx, cy + ry), fill=STYLES[label]["fill"])
            pad = 4.0
            annotations.append(
                {
                    "image_id": image_id,
                    "bbox": [cx - rx - pad, cy - ry - pad, 2 * (rx + pad), 2 * (ry + pad)],
                    "category_id": label,
                    "confidence": 1.0 if label == 1 else 0.0,
                }
            )
        image.save(root / "patches" / f"{image_id}.png")
        images.append(
            {
                "id": image_id,
                "path": f"patches/{image_id}.png",
                "width": patch_size,
                "height": patch_size,
                "split": split,
            }
        )
    manifest = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": k, "name": v} for k, v in CLASS_NAMES.items()],
    }
    manifest_path = root / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path
