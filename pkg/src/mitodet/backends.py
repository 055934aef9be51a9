"""Interchangeable detector backends behind one inference contract.

Three backends ship: a manifest-driven oracle (ground truth, optionally
degraded, for pipeline and evaluator testing), a classical dark-blob baseline
that needs no trained artifacts, and a portable-model backend that loads an
exported inference graph plus its JSON sidecar.
"""

from __future__ import annotations

import importlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import ndimage

from .formats import Manifest
from .geometry import BoundingBox, CellClass, Detection, clip_box, nms
from .tiling import PatchSpec, project_annotations

DEFAULT_SCORE_THRESHOLD = 0.05

# Substream tag for a patch's spurious-box draws, disjoint from box indices.
_SPURIOUS_TAG = 2**32 - 1


@dataclass(frozen=True)
class PatchContext:
    """Where a patch came from; required by backends that replay ground truth."""

    image_id: str
    spec: PatchSpec


class DetectorBackend:
    """Uniform inference contract: an RGB patch in, scored detections out.

    Subclasses implement `_detect`; this base validates patch dimensions,
    clips boxes into the patch, and returns detections sorted by descending
    score. Instances are safe to share across threads unless `single_consumer`
    says otherwise.
    """

    name: str = "abstract"
    patch_size: int | None = None  # None accepts any size
    single_consumer: bool = False

    def detect(self, patch: np.ndarray, context: PatchContext | None = None) -> list[Detection]:
        patch = np.asarray(patch)
        if patch.ndim != 3 or patch.shape[2] != 3:
            raise ValueError(f"{self.name}: expected an HxWx3 patch, got shape {patch.shape}")
        if self.patch_size is not None and patch.shape[:2] != (self.patch_size, self.patch_size):
            raise ValueError(
                f"{self.name}: expected a {self.patch_size}x{self.patch_size} patch, "
                f"got {patch.shape[1]}x{patch.shape[0]}"
            )
        height, width = patch.shape[:2]
        bounds = BoundingBox(0.0, 0.0, float(width), float(height))
        detections = []
        for det in self._detect(patch, context):
            clipped = clip_box(det.box, bounds)
            if clipped is None:
                continue
            if clipped != det.box:
                det = Detection(box=clipped, cell_class=det.cell_class, score=det.score)
            detections.append(det)
        return sorted(detections, key=lambda d: -d.score)

    def _detect(self, patch: np.ndarray, context: PatchContext | None) -> list[Detection]:
        raise NotImplementedError


@dataclass(frozen=True)
class OracleNoise:
    """Seeded degradation knobs for the oracle: box jitter, misses, clutter."""

    jitter_sigma: float = 0.0
    drop_probability: float = 0.0
    spurious_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.jitter_sigma < 0 or self.spurious_rate < 0:
            raise ValueError("jitter_sigma and spurious_rate must be >= 0")
        if not (0.0 <= self.drop_probability <= 1.0):
            raise ValueError(f"drop_probability must be in [0, 1], got {self.drop_probability}")

    @property
    def is_none(self) -> bool:
        return self == OracleNoise()


class OracleBackend(DetectorBackend):
    """Replays manifest ground truth for each patch, optionally perturbed.

    Only boxes fully visible in the patch are emitted (score 1.0). Every random
    draw comes from a substream keyed by (seed, image, patch, box index), so
    output is byte-stable across runs and worker schedules, and the set of
    dropped boxes at a lower drop probability is a subset of the set at a
    higher one under the same seed.
    """

    name = "oracle"

    def __init__(self, manifest: Manifest, noise: OracleNoise | None = None, seed: int = 0):
        self.noise = noise or OracleNoise()
        self.seed = int(seed)
        self._truth: dict[str, list[tuple[BoundingBox, CellClass]]] = {
            image_id: manifest.ground_truth(image_id) for image_id in manifest.image_ids()
        }

    def _rng(self, context: PatchContext, tag: int) -> np.random.Generator:
        key = (
            self.seed,
            zlib.crc32(context.image_id.encode("utf-8")),
            context.spec.row,
            context.spec.col,
            tag,
        )
        return np.random.default_rng(key)

    def _detect(self, patch: np.ndarray, context: PatchContext | None) -> list[Detection]:
        if context is None:
            raise ValueError("oracle backend needs a PatchContext to look up ground truth")
        if context.image_id not in self._truth:
            raise ValueError(f"oracle has no ground truth for image {context.image_id!r}")
        boxes = self._truth[context.image_id]
        visible = project_annotations(boxes, context.spec, min_visible_fraction=1.0)
        height, width = patch.shape[:2]
        patch_bounds = BoundingBox(0.0, 0.0, float(width), float(height))

        detections = []
        for index, (box, cell_class) in enumerate(visible):
            rng = self._rng(context, index)
            # The drop draw comes first so it is identical for every
            # drop_probability, making miss sets nested across a sweep.
            if rng.random() < self.noise.drop_probability:
                continue
            if self.noise.jitter_sigma > 0:
                dx, dy = rng.normal(0.0, self.noise.jitter_sigma, size=2)
                jittered = clip_box(box.translated(dx, dy), patch_bounds)
                if jittered is None:
                    continue
                box = jittered
            detections.append(Detection(box=box, cell_class=cell_class, score=1.0))

        if self.noise.spurious_rate > 0:
            rng = self._rng(context, _SPURIOUS_TAG)
            for _ in range(rng.poisson(self.noise.spurious_rate)):
                side = rng.uniform(20.0, min(80.0, width / 2, height / 2))
                cx = rng.uniform(side / 2, width - side / 2)
                cy = rng.uniform(side / 2, height - side / 2)
                detections.append(
                    Detection(
                        box=BoundingBox(cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2),
                        cell_class=CellClass(int(rng.integers(1, 3))),
                        score=float(rng.uniform(0.05, 0.95)),
                    )
                )
        return detections


@dataclass(frozen=True)
class BlobConfig:
    """Dark-region heuristic: luminance cutoff plus a component-area band."""

    darkness_threshold: float = 120.0
    min_area: float = 120.0
    max_area: float = 8000.0

    def __post_init__(self) -> None:
        if not (0.0 < self.darkness_threshold <= 255.0):
            raise ValueError(f"darkness_threshold must be in (0, 255], got {self.darkness_threshold}")
        if self.min_area <= 0 or self.max_area < self.min_area:
            raise ValueError(f"invalid area band [{self.min_area}, {self.max_area}]")


class BlobBaselineBackend(DetectorBackend):
    """Connected dark regions in the size band, scored by mean darkness.

    A smoke backend: stained nuclei are dark, so thresholded luminance finds
    cell-like blobs with zero trained artifacts. It cannot tell mitotic from
    non-mitotic, so everything it emits is non-mitotic.
    """

    name = "blob"

    def __init__(self, config: BlobConfig | None = None):
        self.config = config or BlobConfig()

    def _detect(self, patch: np.ndarray, context: PatchContext | None) -> list[Detection]:
        rgb = patch.astype(np.float64)
        luminance = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
        mask = luminance < self.config.darkness_threshold
        labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
        detections = []
        for label_id, slc in enumerate(ndimage.find_objects(labels), start=1):
            if slc is None:
                continue
            component = labels[slc] == label_id
            area = int(component.sum())
            if not (self.config.min_area <= area <= self.config.max_area):
                continue
            mean_luminance = float(luminance[slc][component].mean())
            score = max(0.0, min(1.0, 1.0 - mean_luminance / 255.0))
            ys, xs = slc
            detections.append(
                Detection(
                    box=BoundingBox(float(xs.start), float(ys.start), float(xs.stop), float(ys.stop)),
                    cell_class=CellClass.NON_MITOTIC,
                    score=score,
                )
            )
        return detections


# Op libraries a sidecar may require; anything else is refused.
SUPPORTED_OP_LIBRARIES = ("torchvision",)


@dataclass(frozen=True)
class ModelSidecar:
    """Input contract and class map for an exported inference graph."""

    input_size: int
    channel_order: str = "RGB"
    scale: float = 1.0 / 255.0
    mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    std: tuple[float, float, float] = (1.0, 1.0, 1.0)
    class_map: Mapping[int, CellClass] = field(
        default_factory=lambda: {1: CellClass.MITOTIC, 2: CellClass.NON_MITOTIC}
    )
    postprocessing: str = "embedded"  # "embedded" | "raw"
    requires: tuple[str, ...] = ()  # op libraries the graph references
    extra: Mapping = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.channel_order not in ("RGB", "BGR"):
            raise ValueError(f"channel_order must be RGB or BGR, got {self.channel_order}")
        if self.postprocessing not in ("embedded", "raw"):
            raise ValueError(f"postprocessing must be embedded or raw, got {self.postprocessing}")
        if set(self.class_map.values()) != {CellClass.MITOTIC, CellClass.NON_MITOTIC}:
            raise ValueError("class_map must be a bijection onto the two cell classes")
        for name in self.requires:
            if name not in SUPPORTED_OP_LIBRARIES:
                raise ValueError(
                    f"sidecar requires unsupported op library {name!r}; "
                    f"supported: {SUPPORTED_OP_LIBRARIES}"
                )

    def to_dict(self) -> dict:
        return {
            "format": "torchscript",
            "input": {
                "size": self.input_size,
                "layout": "CHW",
                "channel_order": self.channel_order,
                "scale": self.scale,
                "mean": list(self.mean),
                "std": list(self.std),
            },
            "classes": {str(k): v.label for k, v in self.class_map.items()},
            "postprocessing": self.postprocessing,
            "requires": list(self.requires),
            "extra": dict(self.extra),
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "ModelSidecar":
        spec = payload["input"]
        from .geometry import class_from_label

        return cls(
            input_size=int(spec["size"]),
            channel_order=str(spec.get("channel_order", "RGB")),
            scale=float(spec.get("scale", 1.0 / 255.0)),
            mean=tuple(spec.get("mean", (0.0, 0.0, 0.0))),
            std=tuple(spec.get("std", (1.0, 1.0, 1.0))),
            class_map={int(k): class_from_label(v) for k, v in payload["classes"].items()},
            postprocessing=str(payload.get("postprocessing", "embedded")),
            requires=tuple(payload.get("requires", ())),
            extra=dict(payload.get("extra", {})),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ModelSidecar":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


class PortableModelBackend(DetectorBackend):
    """Runs a serialized inference graph (TorchScript) described by a sidecar.

    The graph takes one float32 CHW tensor and returns (boxes, labels, scores).
    When the sidecar flags raw outputs, this backend applies its own score
    threshold and NMS; otherwise it trusts the embedded postprocessing and only
    filters by score.
    """

    name = "model"
    single_consumer = True  # serialize access; JIT graphs are not audited for reentrancy

    def __init__(
        self,
        model_path: str | Path,
        sidecar_path: str | Path | None = None,
        score_threshold: float = DEFAULT_SCORE_THRESHOLD,
        nms_iou: float = 0.5,
        max_detections: int | None = None,
    ):
        try:
            import torch
        except ImportError as exc:
            raise RuntimeError(
                "the portable-model backend needs the optional torch dependency "
                "(pip install mitodet[model])"
            ) from exc
        self._torch = torch
        model_path = Path(model_path)
        sidecar_path = Path(sidecar_path) if sidecar_path else model_path.with_suffix(".json")
        self.sidecar = ModelSidecar.load(sidecar_path)
        for library in self.sidecar.requires:
            # registers the custom ops the serialized graph references
            try:
                importlib.import_module(library)
            except ImportError as exc:
                raise RuntimeError(
                    f"model graph needs the {library!r} op library, which is not installed"
                ) from exc
        self.graph = torch.jit.load(str(model_path), map_location="cpu")
        self.graph.eval()
        self.patch_size = self.sidecar.input_size
        self.score_threshold = score_threshold
        self.nms_iou = nms_iou
        self.max_detections = max_detections

    def _detect(self, patch: np.ndarray, context: PatchContext | None) -> list[Detection]:
        torch = self._torch
        pixels = patch.astype(np.float32)
        if self.sidecar.channel_order == "BGR":
            pixels = pixels[..., ::-1]
        pixels = pixels * self.sidecar.scale
        pixels = (pixels - np.asarray(self.sidecar.mean, dtype=np.float32)) / np.asarray(
            self.sidecar.std, dtype=np.float32
        )
        tensor = torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1)))
        with torch.no_grad():
            boxes, labels, scores = self.graph(tensor)
        detections = []
        for box, label, score in zip(
            boxes.numpy().astype(np.float64),
            labels.numpy().tolist(),
            scores.numpy().astype(np.float64),
        ):
            if label not in self.sidecar.class_map:
                raise ValueError(f"model emitted unmapped class id {label}")
            score = float(min(max(score, 0.0), 1.0))
            if score < self.score_threshold:
                continue
            x_min, y_min, x_max, y_max = box
            if x_max <= x_min or y_max <= y_min:
                continue
            detections.append(
                Detection(
                    box=BoundingBox(x_min, y_min, x_max, y_max),
                    cell_class=self.sidecar.class_map[label],
                    score=score,
                )
            )
        if self.sidecar.postprocessing == "raw":
            detections = nms(detections, self.nms_iou)
        if self.max_detections is not None:
            detections = sorted(detections, key=lambda d: -d.score)[: self.max_detections]
        return detections


def make_backend(
    backend_spec: str,
    manifest: Manifest | None = None,
    noise: OracleNoise | None = None,
    seed: int = 0,
    score_threshold: float = DEFAULT_SCORE_THRESHOLD,
    max_detections: int | None = None,
) -> DetectorBackend:
    """Build a backend from its CLI spelling: oracle | blob | model:PATH."""
    if backend_spec == "oracle":
        if manifest is None:
            raise ValueError("oracle backend needs a manifest")
        return OracleBackend(manifest, noise=noise, seed=seed)
    if backend_spec == "blob":
        return BlobBaselineBackend()
    if backend_spec.startswith("model:"):
        return PortableModelBackend(
            backend_spec.split(":", 1)[1],
            score_threshold=score_threshold,
            max_detections=max_detections,
        )
    raise ValueError(f"unknown backend {backend_spec!r} (expected oracle, blob, or model:PATH)")
