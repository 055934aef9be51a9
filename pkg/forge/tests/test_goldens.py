"""Golden-fixture emission and replay through the pipeline's own tooling."""

import json
import subprocess
import sys

import numpy as np
import pytest

from mitoforge.data import read_manifest
from mitoforge.export import parity_errors
from mitoforge.goldens import emit_goldens, load_golden_detections


@pytest.fixture(scope="module")
def golden_dir(exported, patch_set, tmp_path_factory):
    model_path, sidecar_path = exported
    entries = read_manifest(patch_set, split="validation")
    out = tmp_path_factory.mktemp("goldens") / "set"
    return emit_goldens(model_path, sidecar_path, entries[:12], out)


def grouped_records(records):
    per_image = {}
    for rec in records:
        per_image.setdefault(rec["image_id"], []).append(rec)
    return per_image


def as_arrays(records):
    boxes = np.array([[r["bbox"][0], r["bbox"][1], r["bbox"][0] + r["bbox"][2], r["bbox"][1] + r["bbox"][3]] for r in records]).reshape(-1, 4)
    return {
        "boxes": boxes,
        "labels": np.array([r["category_id"] for r in records], dtype=int),
        "scores": np.array([r["score"] for r in records], dtype=float),
    }


class TestEmission:
    def test_interchange_schema(self, golden_dir):
        records = json.loads((golden_dir / "detections.json").read_text())
        assert records, "golden detections must not be empty"
        for rec in records:
            assert set(rec) == {"image_id", "category_id", "bbox", "score"}
            assert rec["category_id"] in (1, 2)
            assert len(rec["bbox"]) == 4
            assert 0.0 <= rec["score"] <= 1.0

    def test_directory_is_self_contained(self, golden_dir):
        manifest = json.loads((golden_dir / "manifest.json").read_text())
        assert len(manifest["images"]) == 12
        assert {c["name"] for c in manifest["categories"]} == {"mitotic", "nonmitotic"}
        for img in manifest["images"]:
            assert (golden_dir / img["path"]).exists()
        assert (golden_dir / "detector.pt").exists()
        assert (golden_dir / "detector.json").exists()

    def test_reemission_is_byte_identical(self, exported, patch_set, golden_dir, tmp_path):
        model_path, sidecar_path = exported
        entries = read_manifest(patch_set, split="validation")
        again = emit_goldens(model_path, sidecar_path, entries[:12], tmp_path / "again")
        assert (again / "detections.json").read_bytes() == (
            golden_dir / "detections.json"
        ).read_bytes()
        assert (again / "manifest.json").read_bytes() == (
            golden_dir / "manifest.json"
        ).read_bytes()

    def test_minimum_patch_count_enforced(self, exported, patch_set, tmp_path):
        model_path, sidecar_path = exported
        entries = read_manifest(patch_set, split="validation")
        with pytest.raises(ValueError, match="at least 10"):
            emit_goldens(model_path, sidecar_path, entries[:4], tmp_path / "few")

    def test_both_classes_required(self, exported, patch_set, tmp_path):
        model_path, sidecar_path = exported
        entries = read_manifest(patch_set, split="validation")
        single_class = []
        for entry in entries:
            kept = [(b, l) for b, l in zip(entry.boxes, entry.labels) if l == 1]
            entry.boxes = [b for b, _ in kept]
            entry.labels = [l for _, l in kept]
            single_class.append(entry)
        with pytest.raises(ValueError, match="both classes"):
            emit_goldens(model_path, sidecar_path, single_class[:12], tmp_path / "mono")


class TestPrimaryReplay:
    def test_criterion_8_replay_through_pipeline_backend(self, golden_dir, tmp_path):
        """`mitodet detect --backend model:...` reproduces the goldens within tolerance."""
        out = tmp_path / "replay"
        result = subprocess.run(
            [
                sys.executable, "-m", "mitodet.cli", "detect",
                "--manifest", "manifest.json",
                "--backend", "model:detector.pt",
                "--patch-size", "256",
                "--out", str(out),
            ],
            cwd=golden_dir,
            capture_output=True,
            text=True,
        )
        assert result.returncode == 0, result.stderr
        replayed = grouped_records(json.loads((out / "detections.json").read_text()))
        goldens = load_golden_detections(golden_dir)
        assert set(replayed) == set(goldens)
        for image_id, golden_records in goldens.items():
            errors = parity_errors(
                as_arrays(golden_records),
                as_arrays(replayed[image_id]),
                iou_min=0.99,
                score_tol=1e-3,
            )
            assert errors == [], f"{image_id}: {errors}"

    def test_goldens_load_in_primary_backend_api(self, golden_dir):
        mitodet_backends = pytest.importorskip("mitodet.backends")
        backend = mitodet_backends.PortableModelBackend(golden_dir / "detector.pt")
        assert backend.patch_size == 256
        from PIL import Image

        pixels = np.asarray(Image.open(next((golden_dir / "patches").glob("*.png"))).convert("RGB"))
        detections = backend.detect(pixels)
        for det in detections:
            assert 0.0 <= det.score <= 1.0
