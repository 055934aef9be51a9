import numpy as np
import pytest

from mitodet.backends import BlobBaselineBackend, OracleBackend, OracleNoise
from mitodet.config import RunConfig
from mitodet.formats import Manifest
from mitodet.geometry import iou
from mitodet.ingest import build_dataset, dataset_to_manifest, discover_records
from mitodet.runner import build_patch_manifest, run_detection

from conftest import write_fixture_dataset


@pytest.fixture(scope="module")
def manifest(tmp_path_factory) -> Manifest:
    root = tmp_path_factory.mktemp("runner_data")
    images, annotations = write_fixture_dataset(root, n_slides=4, seed=77)
    records = discover_records(images, annotations)
    return dataset_to_manifest(build_dataset(records, seed=0))


def backends_under_test(manifest):
    return [
        OracleBackend(manifest, seed=0),
        OracleBackend(manifest, OracleNoise(jitter_sigma=3.0, spurious_rate=1.0), seed=0),
        BlobBaselineBackend(),
    ]


class TestBackendSubstitutability:
    def test_pipeline_output_structurally_valid_for_every_backend(self, manifest):
        cfg = RunConfig(patch_size=256, merge_iou=0.5).validate()
        for backend in backends_under_test(manifest):
            run = run_detection(manifest, backend, cfg)
            assert set(run.slide_detections) == set(manifest.image_ids())
            for entry in manifest.images:
                slide = run.slide_detections[entry.id]
                dets = slide.detections
                assert len(slide.sources) == len(dets)
                for det in dets:
                    assert 0.0 <= det.score <= 1.0
                    assert 0 <= det.box.x_min < det.box.x_max <= entry.width
                    assert 0 <= det.box.y_min < det.box.y_max <= entry.height
                # aggregation invariant: same-class survivors never overlap
                # at or above the merge threshold
                for i, a in enumerate(dets):
                    for b in dets[i + 1 :]:
                        if a.cell_class == b.cell_class:
                            assert iou(a.box, b.box) < cfg.merge_iou

    def test_jobs_do_not_change_results(self, manifest):
        backend = OracleBackend(manifest, OracleNoise(jitter_sigma=2.0), seed=5)
        serial = run_detection(manifest, backend, RunConfig(jobs=1).validate())
        threaded = run_detection(manifest, backend, RunConfig(jobs=4).validate())
        for image_id in manifest.image_ids():
            assert serial.slide_detections[image_id].detections == (
                threaded.slide_detections[image_id].detections
            )

    def test_single_consumer_backend_runs_serialized(self, manifest):
        backend = OracleBackend(manifest, seed=0)
        backend.single_consumer = True
        run = run_detection(manifest, backend, RunConfig(jobs=8).validate())
        assert set(run.slide_detections) == set(manifest.image_ids())


class TestPatchManifest:
    def test_counts_and_confidence_carried(self, manifest):
        cfg = RunConfig(patch_size=256).validate()
        patch_manifest, empty = build_patch_manifest(manifest, cfg)
        assert empty >= 0
        # fixture boxes never straddle tile boundaries, so projection keeps all
        assert len(patch_manifest.annotations) == len(manifest.annotations)
        confidences = {a.confidence for a in patch_manifest.annotations}
        assert confidences <= {0.0, 1.0}
        for ann in patch_manifest.annotations:
            assert 0 <= ann.box.x_min < ann.box.x_max <= cfg.patch_size
            assert 0 <= ann.box.y_min < ann.box.y_max <= cfg.patch_size
