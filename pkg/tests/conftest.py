"""Shared fixture builders: randomized evaluation scenes and synthetic slides."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from mitodet.formats import Manifest, ManifestAnnotation, ManifestImage
from mitodet.geometry import BoundingBox, CellClass, Detection


def pytest_runtest_logreport(report):
    # One visible pass/fail line per acceptance criterion.
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        print(f"\n[acceptance] {name}: {'PASS' if report.passed else 'FAIL'}")


# ---------------------------------------------------------------------------
# Randomized evaluation scenes (main evaluator vs brute-force reference)
# ---------------------------------------------------------------------------


@dataclass
class Scene:
    manifest: Manifest
    detections: dict[str, list[Detection]]
    # plain-tuple mirrors for the reference evaluator
    gt_tuples: dict[str, list[tuple[tuple[float, float, float, float], int]]]
    det_tuples: dict[str, list[tuple[tuple[float, float, float, float], int, float]]]
    image_order: list[str]


def _random_box(rng, span=200.0) -> BoundingBox:
    x0 = rng.uniform(0, span - 12)
    y0 = rng.uniform(0, span - 12)
    w = rng.uniform(8, min(80.0, span - x0))
    h = rng.uniform(8, min(80.0, span - y0))
    return BoundingBox(x0, y0, x0 + w, y0 + h)


def _perturbed(rng, box: BoundingBox, span=200.0) -> BoundingBox:
    """A detection-like copy: shifted and rescaled so IoUs spread over [0, 1]."""
    cx, cy = box.center
    cx += rng.normal(0, 6.0)
    cy += rng.normal(0, 6.0)
    w = box.width * rng.uniform(0.6, 1.4)
    h = box.height * rng.uniform(0.6, 1.4)
    x0, y0 = cx - w / 2, cy - h / 2
    x0 = min(max(x0, -40.0), span)
    y0 = min(max(y0, -40.0), span)
    return BoundingBox(x0, y0, x0 + max(w, 1.0), y0 + max(h, 1.0))


def random_scene(rng: np.random.Generator, max_gt=50, max_dets=100) -> Scene:
    """A synthetic multi-image evaluation problem with known inputs.

    Classes can be arbitrarily imbalanced (per-scene class biases), detections
    mix perturbed ground-truth copies with clutter, and scores are continuous
    so ordering has no ties.
    """
    n_images = int(rng.integers(1, 5))
    image_ids = [f"scene_img_{i:02d}" for i in range(n_images)]
    manifest = Manifest(
        images=[ManifestImage(id=i, path=f"{i}.png", width=200, height=200) for i in image_ids]
    )
    gt_bias = rng.uniform()
    det_bias = rng.uniform()

    gt_tuples = {i: [] for i in image_ids}
    per_image_gt: dict[str, list[tuple[BoundingBox, int]]] = {i: [] for i in image_ids}
    for _ in range(int(rng.integers(1, max_gt + 1))):
        image_id = image_ids[int(rng.integers(0, n_images))]
        box = _random_box(rng)
        class_id = 1 if rng.uniform() < gt_bias else 2
        manifest.annotations.append(
            ManifestAnnotation(
                image_id=image_id, bbox=box.as_xywh(), category_id=class_id, confidence=1.0
            )
        )
        per_image_gt[image_id].append((box, class_id))
        gt_tuples[image_id].append((box.as_xyxy(), class_id))

    detections = {i: [] for i in image_ids}
    det_tuples = {i: [] for i in image_ids}
    for _ in range(int(rng.integers(0, max_dets + 1))):
        image_id = image_ids[int(rng.integers(0, n_images))]
        gts = per_image_gt[image_id]
        if gts and rng.uniform() < 0.7:
            base, base_class = gts[int(rng.integers(0, len(gts)))]
            box = _perturbed(rng, base)
            # usually the right class, sometimes confused
            class_id = base_class if rng.uniform() < 0.85 else (3 - base_class)
        else:
            box = _random_box(rng)
            class_id = 1 if rng.uniform() < det_bias else 2
        score = float(rng.random())
        detections[image_id].append(Detection(box, CellClass(class_id), score))
        det_tuples[image_id].append((box.as_xyxy(), class_id, score))

    return Scene(
        manifest=manifest,
        detections=detections,
        gt_tuples=gt_tuples,
        det_tuples=det_tuples,
        image_order=image_ids,
    )


# ---------------------------------------------------------------------------
# Synthetic slide fixtures on disk (images + annotation CSVs)
# ---------------------------------------------------------------------------

BACKGROUND = (231, 205, 221)  # pale eosin-like pink
CELL_COLORS = {CellClass.MITOTIC: (70, 48, 130), CellClass.NON_MITOTIC: (118, 76, 96)}


def _cell_slots(width: int, height: int, grid_step=256, box_side=70):
    """Centroid positions spaced so every derived box sits inside one grid cell."""
    slots = []
    half = math.ceil(box_side / 2) + 4  # box half-side plus padding off cell edges
    for cell_y in range(0, height, grid_step):
        for cell_x in range(0, width, grid_step):
            cell_w = min(grid_step, width - cell_x)
            cell_h = min(grid_step, height - cell_y)
            for sy in (64, 192):
                for sx in (64, 192):
                    if half <= sx <= cell_w - half and half <= sy <= cell_h - half:
                        slots.append((cell_x + sx, cell_y + sy))
    return sorted(set(slots))


def write_slide_fixture(
    images_dir: Path,
    annotations_dir: Path,
    image_id: str,
    rng: np.random.Generator,
    size=(512, 384),
    n_cells=(3, 7),
    extra_points: list[tuple[float, float, float]] | None = None,
) -> list[tuple[float, float, float]]:
    """Write one synthetic slide PNG + CSV; returns the (x, y, confidence) rows.

    Cells are placed on a slot lattice so no two boxes overlap and none
    straddles a 256-aligned tile boundary; `extra_points` bypasses the lattice
    for deliberately awkward placements.
    """
    width, height = size
    slots = _cell_slots(width, height)
    count = int(rng.integers(n_cells[0], n_cells[1] + 1))
    count = min(count, len(slots))
    chosen = rng.choice(len(slots), size=count, replace=False)
    rows = []
    for index in sorted(chosen.tolist()):
        x, y = slots[index]
        confidence = 1.0 if rng.uniform() < 0.5 else 0.0
        rows.append((float(x), float(y), confidence))
    rows.extend(extra_points or [])

    image = Image.new("RGB", (width, height), BACKGROUND)
    draw = ImageDraw.Draw(image)
    for x, y, confidence in rows:
        cls = CellClass.MITOTIC if confidence >= 0.5 else CellClass.NON_MITOTIC
        r = 12
        draw.ellipse((x - r, y - r, x + r, y + r), fill=CELL_COLORS[cls])
    images_dir.mkdir(parents=True, exist_ok=True)
    annotations_dir.mkdir(parents=True, exist_ok=True)
    image.save(images_dir / f"{image_id}.png")
    csv_lines = "".join(f"{x:g},{y:g},{c:g}\n" for x, y, c in rows)
    (annotations_dir / f"{image_id}.csv").write_text(csv_lines, encoding="utf-8")
    return rows


def write_fixture_dataset(
    root: Path, n_slides=20, seed=0, size=(512, 384), n_cells=(3, 7)
) -> tuple[Path, Path]:
    """A deterministic on-disk dataset: images/ and annotations/ under root."""
    rng = np.random.default_rng(seed)
    images_dir = root / "images"
    annotations_dir = root / "annotations"
    mitotic_seen = nonmitotic_seen = False
    for i in range(n_slides):
        rows = write_slide_fixture(images_dir, annotations_dir, f"slide_{i:03d}", rng, size, n_cells)
        mitotic_seen = mitotic_seen or any(c >= 0.5 for _, _, c in rows)
        nonmitotic_seen = nonmitotic_seen or any(c < 0.5 for _, _, c in rows)
    assert mitotic_seen and nonmitotic_seen, "fixture set must cover both classes"
    return images_dir, annotations_dir
