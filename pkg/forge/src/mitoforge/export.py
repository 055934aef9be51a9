"""Export a trained detector to the portable TorchScript contract.

The exported graph takes one float32 CHW tensor (RGB, scaled to [0, 1] by the
consumer per the sidecar) and returns (boxes, labels, scores). Score
thresholding and NMS run inside the graph (torchvision's ROI heads), so the
sidecar flags postprocessing as embedded.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Tuple

import numpy as np
import torch
import torch.nn as nn

from .recipe import TrainRecipe

CLASS_MAP = {"1": "mitotic", "2": "nonmitotic"}


class ExportError(RuntimeError):
    """Raised when a model cannot be serialized to the exchange graph."""


class InferenceGraph(nn.Module):
    """Neutral single-image wrapper around a detection model."""

    def __init__(self, detector: nn.Module):
        super().__init__()
        self.detector = detector

    def forward(self, image: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        losses, detections = self.detector([image])
        result = detections[0]
        return result["boxes"], result["labels"], result["scores"]


def build_sidecar(input_size: int, recipe: TrainRecipe, extra: dict | None = None) -> dict:
    return {
        "format": "torchscript",
        "input": {
            "size": input_size,
            "layout": "CHW",
            "channel_order": "RGB",
            "scale": 1.0 / 255.0,
            "mean": [0.0, 0.0, 0.0],
            "std": [1.0, 1.0, 1.0],
        },
        "classes": dict(CLASS_MAP),
        "postprocessing": "embedded",
        # the graph references torchvision custom ops (NMS, ROI align), which
        # must be registered in the consuming process before jit.load
        "requires": ["torchvision"],
        "extra": {"recipe": recipe.to_dict(), **(extra or {})},
    }


def export_model(
    model: nn.Module,
    out_dir: str | Path,
    input_size: int = 256,
    recipe: TrainRecipe = TrainRecipe(),
    extra: dict | None = None,
    name: str = "detector",
) -> tuple[Path, Path]:
    """Serialize the model and its sidecar; returns (model_path, sidecar_path)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    try:
        graph = torch.jit.script(InferenceGraph(model))
    except (RuntimeError, torch.jit.Error) as exc:  # unscriptable operator
        raise ExportError(f"model is not exportable: {exc}") from exc
    model_path = out_dir / f"{name}.pt"
    sidecar_path = out_dir / f"{name}.json"
    torch.jit.save(graph, str(model_path))
    sidecar_path.write_text(
        json.dumps(build_sidecar(input_size, recipe, extra), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return model_path, sidecar_path


def preprocess(pixels: np.ndarray, sidecar: dict) -> torch.Tensor:
    """Patch pixels -> the graph's input tensor, as the sidecar prescribes."""
    spec = sidecar["input"]
    data = pixels.astype(np.float32)
    if spec.get("channel_order", "RGB") == "BGR":
        data = data[..., ::-1]
    data = data * float(spec["scale"])
    data = (data - np.asarray(spec["mean"], dtype=np.float32)) / np.asarray(
        spec["std"], dtype=np.float32
    )
    return torch.from_numpy(np.ascontiguousarray(data.transpose(2, 0, 1)))


@torch.no_grad()
def run_graph(graph, pixels: np.ndarray, sidecar: dict) -> dict:
    """One exported-graph inference pass -> numpy detection arrays."""
    boxes, labels, scores = graph(preprocess(pixels, sidecar))
    return {
        "boxes": boxes.cpu().numpy(),
        "labels": labels.cpu().numpy(),
        "scores": scores.cpu().numpy(),
    }


@torch.no_grad()
def run_native(model: nn.Module, pixels: np.ndarray, sidecar: dict) -> dict:
    """The same pass through the eager model, for parity checks."""
    model.eval()
    output = model([preprocess(pixels, sidecar)])[0]
    return {
        "boxes": output["boxes"].cpu().numpy(),
        "labels": output["labels"].cpu().numpy(),
        "scores": output["scores"].cpu().numpy(),
    }


def _pair_iou(a: np.ndarray, b: np.ndarray) -> float:
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, ix1 - ix0) * max(0.0, iy1 - iy0)
    if inter <= 0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return float(inter / (area_a + area_b - inter))


def parity_errors(native: dict, exported: dict, iou_min=0.99, score_tol=1e-3) -> list[str]:
    """Mismatches between two detection sets paired in score order."""
    errors = []
    if len(native["scores"]) != len(exported["scores"]):
        return [f"detection counts differ: {len(native['scores'])} vs {len(exported['scores'])}"]
    order_n = np.argsort(-native["scores"], kind="stable")
    order_e = np.argsort(-exported["scores"], kind="stable")
    for i, j in zip(order_n, order_e):
        if native["labels"][i] != exported["labels"][j]:
            errors.append(f"label mismatch: {native['labels'][i]} vs {exported['labels'][j]}")
            continue
        iou = _pair_iou(native["boxes"][i], exported["boxes"][j])
        if iou < iou_min:
            errors.append(f"box IoU {iou:.6f} below {iou_min}")
        delta = abs(float(native["scores"][i]) - float(exported["scores"][j]))
        if delta > score_tol:
            errors.append(f"score delta {delta:.6g} above {score_tol}")
    return errors
