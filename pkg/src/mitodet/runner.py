"""Pipeline orchestration: tile each slide, run a backend, aggregate results.

Shared by the `detect` and `pipeline` subcommands. Slides are processed on a
thread pool (detection per patch is independent); results are assembled in
manifest order so output is deterministic regardless of scheduling.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .aggregate import SlideDetections, aggregate
from .backends import DetectorBackend, PatchContext
from .config import RunConfig
from .formats import Manifest, ManifestAnnotation, ManifestImage
from .geometry import Detection
from .stain import ChannelStats, reinhard_map
from .tiling import extract_patch, lift_detections, patch_name, plan_grid, project_annotations

log = logging.getLogger(__name__)


@dataclass
class DetectionRun:
    """Everything one detection pass produces, keyed for both granularities."""

    slide_detections: dict[str, SlideDetections] = field(default_factory=dict)
    patch_detections: dict[str, list[Detection]] = field(default_factory=dict)
    patches_processed: int = 0


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def resolve_target_stats(cfg: RunConfig) -> ChannelStats | None:
    """The normalization target, from a stats JSON or a reference image."""
    if cfg.normalization != "reinhard":
        return None
    target = Path(cfg.target)
    if target.suffix == ".json":
        return ChannelStats.load(target)
    from .stain import fit_target

    return fit_target(target)


def detect_slide(
    entry: ManifestImage,
    backend: DetectorBackend,
    cfg: RunConfig,
    target_stats: ChannelStats | None,
) -> tuple[SlideDetections, dict[str, list[Detection]], int]:
    """Tile one slide, detect per patch, lift, and aggregate."""
    slide = load_image(entry.path)
    if target_stats is not None:
        slide = reinhard_map(slide, target=target_stats, epsilon=cfg.epsilon)
    grid = plan_grid(entry.width, entry.height, cfg.patch_size, cfg.overlap)
    per_patch = []
    patch_level: dict[str, list[Detection]] = {}
    for spec in grid.specs():
        patch = extract_patch(slide, spec, grid.pad_color)
        detections = backend.detect(patch, PatchContext(entry.id, spec))
        patch_level[patch_name(entry.id, spec)] = detections
        per_patch.append((spec, lift_detections(detections, spec, grid.slide_size)))
    aggregated = aggregate(entry.id, per_patch, grid, cfg.merge_iou)
    return aggregated, patch_level, grid.rows * grid.cols


def run_detection(
    manifest: Manifest,
    backend: DetectorBackend,
    cfg: RunConfig,
    target_stats: ChannelStats | None = None,
) -> DetectionRun:
    jobs = 1 if backend.single_consumer else cfg.effective_jobs()
    run = DetectionRun()

    def work(entry: ManifestImage):
        return detect_slide(entry, backend, cfg, target_stats)

    if jobs == 1:
        results = [work(entry) for entry in manifest.images]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, manifest.images))
    for entry, (aggregated, patch_level, n_patches) in zip(manifest.images, results):
        run.slide_detections[entry.id] = aggregated
        run.patch_detections.update(patch_level)
        run.patches_processed += n_patches
    log.info(
        "detected over %d slides / %d patches with backend %s",
        len(manifest.images),
        run.patches_processed,
        backend.name,
    )
    return run


def build_patch_manifest(manifest: Manifest, cfg: RunConfig, patches_root: str = "") -> tuple[Manifest, int]:
    """Project slide ground truth onto the tiling; one manifest entry per patch.

    Patches with no surviving annotations are kept (their count is returned)
    so patch-level evaluation sees the same negatives the detector does.
    """
    patch_manifest = Manifest()
    empty_patches = 0
    for entry in manifest.images:
        truth = manifest.ground_truth(entry.id)
        confidences = [a.confidence for a in manifest.annotations_for(entry.id)]
        grid = plan_grid(entry.width, entry.height, cfg.patch_size, cfg.overlap)
        for spec in grid.specs():
            name = patch_name(entry.id, spec)
            path = f"{patches_root}/{name}.png" if patches_root else f"{name}.png"
            patch_manifest.images.append(
                ManifestImage(
                    id=name,
                    path=path,
                    width=cfg.patch_size,
                    height=cfg.patch_size,
                    split=entry.split,
                )
            )
            projected = project_annotations(truth, spec, cfg.min_visible)
            if not projected:
                empty_patches += 1
            # visibility filtering can drop boxes, so recover each projected
            # box's confidence from its source annotation by index match
            kept_indices = _projection_indices(truth, spec, cfg.min_visible)
            for (box, cell_class), source_index in zip(projected, kept_indices):
                patch_manifest.annotations.append(
                    ManifestAnnotation(
                        image_id=name,
                        bbox=box.as_xywh(),
                        category_id=int(cell_class),
                        confidence=confidences[source_index],
                    )
                )
    return patch_manifest, empty_patches


def _projection_indices(truth, spec, min_visible: float) -> list[int]:
    """Indices of the ground-truth entries that survive projection onto `spec`."""
    kept = []
    for index, labeled_box in enumerate(truth):
        if project_annotations([labeled_box], spec, min_visible):
            kept.append(index)
    return kept
