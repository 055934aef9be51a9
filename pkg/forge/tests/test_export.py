import json

import numpy as np
import pytest
import torch
from PIL import Image

from mitoforge.data import read_manifest
from mitoforge.export import (
    ExportError,
    export_model,
    parity_errors,
    run_graph,
    run_native,
)
from mitoforge.recipe import TrainRecipe


def load_pixels(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


class TestExportParity:
    def test_criterion_8_native_vs_exported(self, trained, exported, patch_set):
        """Every box pair within IoU >= 0.99 and 1e-3 score, labels identical."""
        model_path, sidecar_path = exported
        sidecar = json.loads(sidecar_path.read_text())
        graph = torch.jit.load(str(model_path))
        graph.eval()
        entries = read_manifest(patch_set, split="validation")[:10]
        assert len(entries) == 10
        for entry in entries:
            pixels = load_pixels(entry.path)
            native = run_native(trained.model, pixels, sidecar)
            via_graph = run_graph(graph, pixels, sidecar)
            assert parity_errors(native, via_graph, iou_min=0.99, score_tol=1e-3) == []

    def test_parity_errors_catch_mismatches(self):
        base = {
            "boxes": np.array([[0.0, 0.0, 10.0, 10.0]]),
            "labels": np.array([1]),
            "scores": np.array([0.9]),
        }
        shifted = {
            "boxes": np.array([[3.0, 0.0, 13.0, 10.0]]),
            "labels": np.array([1]),
            "scores": np.array([0.9]),
        }
        assert parity_errors(base, dict(base)) == []
        assert any("IoU" in e for e in parity_errors(base, shifted))
        relabeled = dict(base, labels=np.array([2]))
        assert any("label" in e for e in parity_errors(base, relabeled))
        rescored = dict(base, scores=np.array([0.894]))
        assert any("score" in e for e in parity_errors(base, rescored))
        missing = {
            "boxes": np.zeros((0, 4)),
            "labels": np.zeros(0, int),
            "scores": np.zeros(0),
        }
        assert any("counts differ" in e for e in parity_errors(base, missing))


class TestSidecar:
    def test_contract_fields(self, exported):
        _, sidecar_path = exported
        sidecar = json.loads(sidecar_path.read_text())
        assert sidecar["format"] == "torchscript"
        assert sidecar["input"]["size"] == 256
        assert sidecar["input"]["layout"] == "CHW"
        assert sidecar["input"]["channel_order"] == "RGB"
        assert sidecar["postprocessing"] == "embedded"
        assert sidecar["classes"] == {"1": "mitotic", "2": "nonmitotic"}

    def test_recipe_round_trips_through_sidecar(self, exported):
        _, sidecar_path = exported
        sidecar = json.loads(sidecar_path.read_text())
        assert TrainRecipe.from_dict(sidecar["extra"]["recipe"]) == TrainRecipe()


class Unscriptable(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.fn = lambda x: x  # lambdas cannot be serialized into a graph

    def forward(self, images):
        return self.fn(images)


class TestExportErrors:
    def test_unscriptable_model_raises_export_error(self, tmp_path):
        with pytest.raises(ExportError, match="not exportable"):
            export_model(Unscriptable(), tmp_path)
