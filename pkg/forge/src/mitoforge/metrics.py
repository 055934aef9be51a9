"""Compact mAP@0.5 used as the early-stopping signal during training."""

from __future__ import annotations

import numpy as np


def _iou(box: np.ndarray, others: np.ndarray) -> np.ndarray:
    ix0 = np.maximum(box[0], others[:, 0])
    iy0 = np.maximum(box[1], others[:, 1])
    ix1 = np.minimum(box[2], others[:, 2])
    iy1 = np.minimum(box[3], others[:, 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (others[:, 2] - others[:, 0]) * (others[:, 3] - others[:, 1])
    union = area + areas - inter
    return np.where(inter > 0, inter / union, 0.0)


def map50(predictions: list[dict], targets: list[dict], classes=(1, 2)) -> float:
    """Mean 101-point interpolated AP at IoU 0.5 over the classes present.

    `predictions` and `targets` are parallel per-image dicts with numpy
    arrays under "boxes" (xyxy), "labels", and (predictions only) "scores".
    """
    levels = np.array([k / 100 for k in range(101)])
    per_class = []
    for cls in classes:
        total_gt = sum(int((t["labels"] == cls).sum()) for t in targets)
        pooled = []
        for pred, target in zip(predictions, targets):
            mask = pred["labels"] == cls
            boxes = pred["boxes"][mask]
            scores = pred["scores"][mask]
            gt = target["boxes"][target["labels"] == cls]
            taken = np.zeros(len(gt), dtype=bool)
            for i in np.argsort(-scores, kind="stable"):
                hit = False
                if len(gt):
                    ious = _iou(boxes[i], gt)
                    ious[taken] = 0.0
                    j = int(np.argmax(ious))
                    if ious[j] >= 0.5:
                        taken[j] = True
                        hit = True
                pooled.append((float(scores[i]), hit))
        if total_gt == 0:
            if pooled:
                per_class.append(0.0)
            continue
        if not pooled:
            per_class.append(0.0)
            continue
        pooled.sort(key=lambda p: -p[0])
        flags = np.array([hit for _, hit in pooled])
        tp = np.cumsum(flags)
        fp = np.cumsum(~flags)
        recall = tp / total_gt
        precision = tp / (tp + fp)
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        idx = np.searchsorted(recall, levels, side="left")
        sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
        per_class.append(float(sampled.mean()))
    return float(np.mean(per_class)) if per_class else 0.0
