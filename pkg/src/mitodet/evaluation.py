"""Detection scoring: greedy matching, PR curves, per-class AP, mAP.

The protocol follows standard COCO-style evaluation: detections are matched
to ground truth greedily in descending-score order per image, per class, at a
given IoU threshold; true/false-positive flags are pooled across images;
precision is interpolated to be non-increasing and sampled at 101 recall
levels; AP is the mean of the sampled precisions. mAP averages AP over
classes, and the sweep variant additionally averages over ten IoU thresholds
0.50 to 0.95.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .formats import Manifest
from .geometry import BoundingBox, CellClass, Detection, iou_matrix

log = logging.getLogger(__name__)

COCO_THRESHOLDS: tuple[float, ...] = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
# The 101 recall sample points 0.00, 0.01, ..., 1.00 as correctly-rounded
# decimals (np.linspace drifts off the decimal grid at several indices).
RECALL_LEVELS = np.array([k / 100 for k in range(101)])


@dataclass(frozen=True)
class DetMatch:
    """One detection's outcome at a fixed IoU threshold."""

    det_index: int
    score: float
    cell_class: CellClass
    is_tp: bool
    gt_index: int | None
    iou: float


@dataclass
class MatchResult:
    """Match outcomes for one image: per-detection flags, per-GT matched bits."""

    matches: list[DetMatch] = field(default_factory=list)  # descending score
    gt_matched: list[bool] = field(default_factory=list)

    @property
    def tp_count(self) -> int:
        return sum(1 for m in self.matches if m.is_tp)


def match_detections(
    detections: Sequence[Detection],
    ground_truth: Sequence[tuple[BoundingBox, CellClass]],
    iou_threshold: float,
) -> MatchResult:
    """Greedy class-wise matching within one image.

    Detections are processed in descending score order (ties by input order);
    each one claims the unmatched same-class ground truth with the highest IoU,
    provided that IoU reaches the threshold. Everything else is a false
    positive.
    """
    if not (0.0 < iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    result = MatchResult(gt_matched=[False] * len(ground_truth))
    if not detections:
        return result
    ious = None
    if ground_truth:
        ious = iou_matrix(
            np.array([d.box.as_xyxy() for d in detections]),
            np.array([b.as_xyxy() for b, _ in ground_truth]),
        )
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    for det_index in order:
        det = detections[det_index]
        best_gt = None
        best_iou = 0.0
        for gt_index, (_, gt_class) in enumerate(ground_truth):
            if result.gt_matched[gt_index] or gt_class != det.cell_class:
                continue
            candidate = float(ious[det_index, gt_index])
            if candidate >= iou_threshold and candidate > best_iou:
                best_iou = candidate
                best_gt = gt_index
        if best_gt is None:
            result.matches.append(
                DetMatch(det_index, det.score, det.cell_class, False, None, 0.0)
            )
        else:
            result.gt_matched[best_gt] = True
            result.matches.append(
                DetMatch(det_index, det.score, det.cell_class, True, best_gt, best_iou)
            )
    return result


@dataclass(frozen=True)
class PRCurve:
    """Precision at 101 recall levels 0.00, 0.01, ..., 1.00 (interpolated)."""

    recalls: tuple[float, ...]
    precisions: tuple[float, ...]

    def to_dict(self) -> dict:
        return {"recall": list(self.recalls), "precision": list(self.precisions)}


def pr_curve(scored_flags: Sequence[tuple[float, bool]], total_gt: int) -> PRCurve:
    """Interpolated PR curve from pooled (score, is_tp) pairs.

    Precision at recall r is the maximum running precision at any recall >= r,
    which makes the sampled curve non-increasing.
    """
    if total_gt < 0:
        raise ValueError("total_gt must be >= 0")
    if total_gt == 0:
        # No recall axis exists; the curve (and its AP) is all zeros.
        return PRCurve(tuple(RECALL_LEVELS.tolist()), (0.0,) * len(RECALL_LEVELS))
    if not scored_flags:
        return PRCurve(tuple(RECALL_LEVELS.tolist()), (0.0,) * len(RECALL_LEVELS))
    scores = np.array([s for s, _ in scored_flags])
    flags = np.array([bool(t) for _, t in scored_flags])
    order = np.argsort(-scores, kind="mergesort")  # stable: ties keep pool order
    flags = flags[order]
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / total_gt
    precision = tp / (tp + fp)
    # Right-to-left running max gives the non-increasing envelope.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    indices = np.searchsorted(recall, RECALL_LEVELS, side="left")
    sampled = np.where(indices < len(envelope), envelope[np.minimum(indices, len(envelope) - 1)], 0.0)
    return PRCurve(tuple(RECALL_LEVELS.tolist()), tuple(sampled.tolist()))


def average_precision(curve: PRCurve) -> float:
    """Mean interpolated precision over the 101 recall samples."""
    return float(np.mean(curve.precisions))


@dataclass
class EvalReport:
    """Per-class AP across IoU thresholds, headline mAPs, and counts."""

    thresholds: tuple[float, ...]
    ap: dict[CellClass, dict[float, float | None]]
    curves: dict[CellClass, PRCurve]
    n_images: int
    gt_counts: dict[CellClass, int]
    det_counts: dict[CellClass, int]
    granularity: str = "slide"

    def map_at(self, threshold: float) -> float:
        values = [
            by_thr[threshold] for by_thr in self.ap.values() if by_thr[threshold] is not None
        ]
        if not values:
            log.warning("no class has ground truth or detections; mAP defined as 0")
            return 0.0
        return float(np.mean(values))

    @property
    def map_50(self) -> float:
        return self.map_at(0.5)

    @property
    def map_sweep(self) -> float:
        """Mean AP over the threshold sweep, then over classes."""
        per_class = []
        for by_thr in self.ap.values():
            values = [v for v in by_thr.values() if v is not None]
            if values:
                per_class.append(float(np.mean(values)))
        if not per_class:
            log.warning("no class has ground truth or detections; mAP defined as 0")
            return 0.0
        return float(np.mean(per_class))

    def to_json_dict(self) -> dict:
        payload = {
            "granularity": self.granularity,
            "thresholds": list(self.thresholds),
            "per_class": {
                cls.label: {
                    "ap": {f"{t:.2f}": self.ap[cls][t] for t in self.thresholds},
                    "ground_truth": self.gt_counts[cls],
                    "detections": self.det_counts[cls],
                }
                for cls in self.ap
            },
            "counts": {"images": self.n_images},
            "pr_curves": {cls.label: curve.to_dict() for cls, curve in self.curves.items()},
        }
        if 0.5 in self.thresholds:
            payload["map_50"] = self.map_at(0.5)
        if tuple(self.thresholds) == COCO_THRESHOLDS:
            payload["map_sweep"] = self.map_sweep
        return payload

    def table(self) -> str:
        lines = [
            f"{'class':<12} " + " ".join(f"AP@{t:.2f}" for t in self.thresholds),
        ]
        for cls, by_thr in self.ap.items():
            cells = " ".join(
                f"{by_thr[t]:7.4f}" if by_thr[t] is not None else "      -" for t in self.thresholds
            )
            lines.append(f"{cls.label:<12} {cells}")
        if 0.5 in self.thresholds:
            lines.append(f"mAP@0.5           = {self.map_at(0.5):.6f}")
        if tuple(self.thresholds) == COCO_THRESHOLDS:
            lines.append(f"mAP@[0.50:0.95]   = {self.map_sweep:.6f}")
        lines.append(
            f"images: {self.n_images}, ground truth: "
            + ", ".join(f"{cls.label}={self.gt_counts[cls]}" for cls in self.gt_counts)
            + ", detections: "
            + ", ".join(f"{cls.label}={self.det_counts[cls]}" for cls in self.det_counts)
        )
        return "\n".join(lines)


def evaluate(
    detections: Mapping[str, Sequence[Detection]],
    manifest: Manifest,
    thresholds: Sequence[float] = COCO_THRESHOLDS,
    granularity: str = "slide",
    max_detections: int | None = None,
) -> EvalReport:
    """Score detections against the manifest's ground truth.

    Detections may cover a subset of manifest images (absent images simply
    contribute no detections), but an unknown image id is an error.
    """
    image_ids = manifest.image_ids()
    known = set(image_ids)
    for image_id in detections:
        if image_id not in known:
            raise ValueError(f"detections reference unknown image id {image_id!r}")
    thresholds = tuple(thresholds)

    per_image_dets: dict[str, list[Detection]] = {}
    for image_id in image_ids:
        dets = list(detections.get(image_id, ()))
        if max_detections is not None:
            dets = sorted(dets, key=lambda d: -d.score)[:max_detections]
        per_image_dets[image_id] = dets
    per_image_gts = {image_id: manifest.ground_truth(image_id) for image_id in image_ids}

    gt_counts = {cls: 0 for cls in CellClass}
    det_counts = {cls: 0 for cls in CellClass}
    for gts in per_image_gts.values():
        for _, cls in gts:
            gt_counts[cls] += 1
    for dets in per_image_dets.values():
        for det in dets:
            det_counts[det.cell_class] += 1

    ap: dict[CellClass, dict[float, float | None]] = {cls: {} for cls in CellClass}
    curves: dict[CellClass, PRCurve] = {}
    for threshold in thresholds:
        pooled: dict[CellClass, list[tuple[float, bool]]] = {cls: [] for cls in CellClass}
        for image_id in image_ids:
            result = match_detections(per_image_dets[image_id], per_image_gts[image_id], threshold)
            for m in result.matches:
                pooled[m.cell_class].append((m.score, m.is_tp))
        for cls in CellClass:
            if gt_counts[cls] == 0 and det_counts[cls] == 0:
                ap[cls][threshold] = None  # class absent entirely; excluded from means
                continue
            if gt_counts[cls] == 0:
                log.warning(
                    "class %s has detections but no ground truth; AP defined as 0", cls.label
                )
            curve = pr_curve(pooled[cls], gt_counts[cls])
            ap[cls][threshold] = average_precision(curve)
            if threshold == 0.5:
                curves[cls] = curve

    return EvalReport(
        thresholds=thresholds,
        ap=ap,
        curves=curves,
        n_images=len(image_ids),
        gt_counts=gt_counts,
        det_counts=det_counts,
        granularity=granularity,
    )
