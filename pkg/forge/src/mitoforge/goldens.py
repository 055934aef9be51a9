"""Golden detection fixtures: frozen exported-graph outputs on known patches.

A golden directory is self-contained: the patch images, a manifest naming
them (with their ground truth), and the exported graph's detections in the
interchange format. The pipeline's portable-model backend must replay these
within the export-parity tolerance.
"""

from __future__ import annotations

import json
import shutil
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import CLASS_NAMES, PatchEntry


def _canonical_json(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def emit_goldens(
    model_path: str | Path,
    sidecar_path: str | Path,
    entries: list[PatchEntry],
    out_dir: str | Path,
    min_patches: int = 10,
) -> Path:
    """Run the exported graph over patches and freeze everything to disk.

    Requires at least `min_patches` patches and ground truth spanning both
    classes, so the fixtures exercise the whole label map.
    """
    from .export import run_graph  # local import keeps torch load cost here

    if len(entries) < min_patches:
        raise ValueError(f"need at least {min_patches} golden patches, got {len(entries)}")
    labels_present = {label for e in entries for label in e.labels}
    if labels_present != set(CLASS_NAMES):
        raise ValueError(f"golden patches must span both classes, found {sorted(labels_present)}")

    out_dir = Path(out_dir)
    (out_dir / "patches").mkdir(parents=True, exist_ok=True)
    sidecar = json.loads(Path(sidecar_path).read_text(encoding="utf-8"))
    graph = torch.jit.load(str(model_path), map_location="cpu")
    graph.eval()

    images = []
    annotations = []
    records = []
    for entry in sorted(entries, key=lambda e: e.image_id):
        destination = out_dir / "patches" / f"{entry.image_id}.png"
        shutil.copyfile(entry.path, destination)
        images.append(
            {
                "id": entry.image_id,
                "path": f"patches/{entry.image_id}.png",
                "width": entry.width,
                "height": entry.height,
                "split": "validation",
            }
        )
        for (x0, y0, x1, y1), label in zip(entry.boxes, entry.labels):
            annotations.append(
                {
                    "image_id": entry.image_id,
                    "bbox": [x0, y0, x1 - x0, y1 - y0],
                    "category_id": label,
                    "confidence": 1.0 if label == 1 else 0.0,
                }
            )
        pixels = np.asarray(Image.open(destination).convert("RGB"))
        result = run_graph(graph, pixels, sidecar)
        for box, label, score in zip(result["boxes"], result["labels"], result["scores"]):
            x0, y0, x1, y1 = (float(v) for v in box)
            records.append(
                {
                    "image_id": entry.image_id,
                    "category_id": int(label),
                    "bbox": [x0, y0, x1 - x0, y1 - y0],
                    "score": float(score),
                }
            )

    manifest = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": k, "name": v} for k, v in CLASS_NAMES.items()],
    }
    (out_dir / "manifest.json").write_text(_canonical_json(manifest), encoding="utf-8")
    (out_dir / "detections.json").write_text(_canonical_json(records), encoding="utf-8")
    shutil.copyfile(model_path, out_dir / Path(model_path).name)
    shutil.copyfile(sidecar_path, out_dir / Path(sidecar_path).name)
    return out_dir


def load_golden_detections(out_dir: str | Path) -> dict[str, list[dict]]:
    """Golden interchange records grouped by patch id."""
    records = json.loads((Path(out_dir) / "detections.json").read_text(encoding="utf-8"))
    grouped: dict[str, list[dict]] = {}
    for record in records:
        grouped.setdefault(record["image_id"], []).append(record)
    return grouped
