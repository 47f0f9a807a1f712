"""Mean average precision with greedy IoU matching and 101-point interpolation."""
from __future__ import annotations

import numpy as np

from .boxes import BoxLabel, iou
from .types import DetectionSet

RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def _as_detections(pred) -> list[tuple[int, float, tuple]]:
    if isinstance(pred, DetectionSet):
        return pred.scored_detections()
    return list(pred)


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """101-point interpolated AP from a ranked precision/recall curve."""
    if recall.size == 0:
        return 0.0
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < recall.size, envelope[np.minimum(idx, recall.size - 1)], 0.0)
    return float(sampled.mean())


def average_precision(dets, truth_boxes: dict[int, list[tuple]], iou_threshold: float) -> float:
    """AP for one class.

    ``dets`` is a list of ``(image_index, score, box)``; ``truth_boxes`` maps
    image index to the ground-truth boxes of this class.
    """
    n_truth = sum(len(v) for v in truth_boxes.values())
    if n_truth == 0:
        raise ValueError("average precision is undefined without ground truth")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], dets[i][0], i))
    used = {img: [False] * len(boxes) for img, boxes in truth_boxes.items()}
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        img, _, box = dets[i]
        best, best_j = iou_threshold, -1
        for j, gt in enumerate(truth_boxes.get(img, [])):
            if used[img][j]:
                continue
            o = iou(box, gt)
            if o >= best:
                best, best_j = o, j
        if best_j >= 0:
            used[img][best_j] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_truth
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    return interpolated_ap(recall, precision)


def evaluate_map(predictions, truth: list[list[BoxLabel]], iou_threshold: float = 0.5) -> float:
    """mAP on a 0-100 scale, averaged over the classes present in ``truth``.

    ``predictions`` holds one entry per image: a single-image ``DetectionSet``
    (every kept query becomes a detection of its best foreground class) or a
    list of ``(class_id, score, box)`` tuples.
    """
    if len(predictions) != len(truth):
        raise ValueError(f"{len(predictions)} predictions for {len(truth)} images")
    classes = sorted({lb.class_id for labels in truth for lb in labels})
    if not classes:
        raise ValueError("mAP is undefined: no ground-truth boxes")
    per_class_dets: dict[int, list] = {c: [] for c in classes}
    per_class_truth: dict[int, dict[int, list]] = {c: {} for c in classes}
    for img, labels in enumerate(truth):
        for lb in labels:
            per_class_truth[lb.class_id].setdefault(img, []).append(lb.box)
    for img, pred in enumerate(predictions):
        for cls, score, box in _as_detections(pred):
            if cls in per_class_dets:
                per_class_dets[cls].append((img, score, box))
    aps = [average_precision(per_class_dets[c], per_class_truth[c], iou_threshold) for c in classes]
    return 100.0 * float(np.mean(aps))
