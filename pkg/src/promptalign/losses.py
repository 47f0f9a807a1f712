"""Set-prediction detection loss."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .boxes import BoxLabel, generalized_box_iou, labels_to_tensors
from .matching import Assignment
from .types import DetectionSet


@dataclass(frozen=True)
class LossWeights:
    ce: float = 1.0
    l1: float = 5.0
    giou: float = 2.0
    # relative weight of the background class in the cross-entropy
    background: float = 0.1


def detection_loss(
    predictions: DetectionSet,
    targets: list[list[BoxLabel]],
    assignments: list[Assignment],
    weights: LossWeights = LossWeights(),
    return_parts: bool = False,
):
    """Cross-entropy over all queries plus L1 and (1 - gIoU) over matched pairs.

    ``predictions`` is batched ``[B, N_q, ...]``. The cross-entropy is a
    weighted mean over every query of the batch; box terms are averaged over
    the matched pairs of the batch.
    """
    logits, boxes = predictions.class_logits, predictions.boxes
    if logits.dim() == 2:
        logits, boxes = logits[None], boxes[None]
    b, n_q, k1 = logits.shape
    if len(targets) != b or len(assignments) != b:
        raise ValueError(f"batch of {b} predictions but {len(targets)} targets / {len(assignments)} assignments")
    target_classes = torch.full((b, n_q), k1 - 1, dtype=torch.long, device=logits.device)
    src_boxes, tgt_boxes = [], []
    for i, (labels, asg) in enumerate(zip(targets, assignments)):
        if not asg.pairs:
            continue
        qi = asg.query_indices
        ti = asg.target_indices
        if max(qi) >= n_q or max(ti) >= len(labels):
            raise ValueError(f"assignment {asg.pairs} inconsistent with {n_q} queries / {len(labels)} targets")
        cls, bx = labels_to_tensors(labels, dtype=boxes.dtype)
        target_classes[i, qi] = cls[ti].to(logits.device)
        src_boxes.append(boxes[i, qi])
        tgt_boxes.append(bx[ti].to(boxes.device))

    class_weight = torch.ones(k1, dtype=logits.dtype, device=logits.device)
    class_weight[-1] = weights.background
    loss_ce = F.cross_entropy(logits.reshape(-1, k1), target_classes.reshape(-1), weight=class_weight)

    if src_boxes:
        sb = torch.cat(src_boxes)
        tb = torch.cat(tgt_boxes)
        n_box = sb.shape[0]
        loss_l1 = (sb - tb).abs().sum() / n_box
        loss_giou = (1 - torch.diag(generalized_box_iou(sb, tb))).sum() / n_box
    else:
        loss_l1 = logits.new_zeros(())
        loss_giou = logits.new_zeros(())

    total = weights.ce * loss_ce + weights.l1 * loss_l1 + weights.giou * loss_giou
    if return_parts:
        return total, {"ce": loss_ce, "l1": loss_l1, "giou": loss_giou}
    return total

