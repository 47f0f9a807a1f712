"""Bipartite matching between object queries and target boxes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .boxes import BoxLabel, generalized_box_iou, labels_to_tensors


@dataclass(frozen=True)
class Assignment:
    """Matched ``(query_index, target_index)`` pairs, sorted by query index.

    Queries that do not appear are background.
    """

    pairs: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        qs = [q for q, _ in self.pairs]
        ts = [t for _, t in self.pairs]
        if len(set(qs)) != len(qs) or len(set(ts)) != len(ts):
            raise ValueError(f"assignment is not injective: {self.pairs}")

    def __len__(self):
        return len(self.pairs)

    @property
    def query_indices(self) -> list[int]:
        return [q for q, _ in self.pairs]

    @property
    def target_indices(self) -> list[int]:
        return [t for _, t in self.pairs]


def solve_cost_matrix(cost) -> Assignment:
    """Minimum-cost injective assignment of rows (queries) to columns (targets).

    Requires ``n_cols <= n_rows``; every column is matched.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    n_q, n_t = cost.shape
    if n_t > n_q:
        raise ValueError(f"{n_t} targets cannot be matched to {n_q} queries")
    if n_t == 0:
        return Assignment(())
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    return Assignment(tuple(sorted((int(r), int(c)) for r, c in zip(rows, cols))))


def matching_cost(class_logits, boxes, targets: list[BoxLabel], cost_weights=(1.0, 5.0, 2.0)):
    """DETR-style cost ``[n_queries, n_targets]`` for one image."""
    w_class, w_l1, w_giou = cost_weights
    with torch.no_grad():
        tgt_cls, tgt_box = labels_to_tensors(targets, dtype=boxes.dtype)
        prob = class_logits.softmax(-1)
        c_class = -prob[:, tgt_cls]
        c_l1 = torch.cdist(boxes, tgt_box, p=1)
        c_giou = -generalized_box_iou(boxes, tgt_box)
        return (w_class * c_class + w_l1 * c_l1 + w_giou * c_giou).cpu().numpy()


def hungarian_match(predictions, targets: list[BoxLabel], cost_weights=(1.0, 5.0, 2.0)) -> Assignment:
    """Match the queries of a single-image ``DetectionSet`` to ``targets``."""
    n_q = predictions.class_logits.shape[-2]
    if len(targets) > n_q:
        raise ValueError(f"{len(targets)} targets exceed {n_q} object queries")
    if not targets:
        return Assignment(())
    cost = matching_cost(predictions.class_logits, predictions.boxes, targets, cost_weights)
    return solve_cost_matrix(cost)
