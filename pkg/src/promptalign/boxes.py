"""Box containers and overlap measures.

Boxes are normalized ``(cx, cy, w, h)`` throughout; the ``xyxy`` form only
appears inside the overlap computations.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor


@dataclass(frozen=True)
class BoxLabel:
    class_id: int
    box: tuple[float, float, float, float]

    def __post_init__(self):
        cx, cy, w, h = self.box
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")
        if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
            raise ValueError(f"box centre outside [0,1]: {self.box}")
        if not (0.0 < w <= 1.0 and 0.0 < h <= 1.0):
            raise ValueError(f"box size outside (0,1]: {self.box}")

    def to_dict(self) -> dict:
        cx, cy, w, h = self.box
        return {"class_id": int(self.class_id), "cx": cx, "cy": cy, "w": w, "h": h}

    @classmethod
    def from_dict(cls, d: dict) -> "BoxLabel":
        return cls(int(d["class_id"]), (float(d["cx"]), float(d["cy"]), float(d["w"]), float(d["h"])))


def labels_to_tensors(labels: list[BoxLabel], dtype=torch.float32) -> tuple[Tensor, Tensor]:
    """Stack labels into ``(classes [n], boxes [n, 4])``."""
    if not labels:
        return torch.zeros(0, dtype=torch.long), torch.zeros(0, 4, dtype=dtype)
    classes = torch.tensor([lb.class_id for lb in labels], dtype=torch.long)
    boxes = torch.tensor([lb.box for lb in labels], dtype=dtype)
    return classes, boxes


def box_cxcywh_to_xyxy(b: Tensor) -> Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(b: Tensor) -> Tensor:
    x0, y0, x1, y1 = b.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


def _pairwise_inter_union(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return inter, union


def box_iou(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise IoU of ``cxcywh`` boxes, ``[n, 4] x [m, 4] -> [n, m]``."""
    inter, union = _pairwise_inter_union(box_cxcywh_to_xyxy(a), box_cxcywh_to_xyxy(b))
    return inter / union


def generalized_box_iou(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise generalized IoU of ``cxcywh`` boxes, values in ``[-1, 1]``."""
    a = box_cxcywh_to_xyxy(a)
    b = box_cxcywh_to_xyxy(b)
    inter, union = _pairwise_inter_union(a, b)
    iou = inter / union
    lt = torch.min(a[:, None, :2], b[None, :, :2])
    rb = torch.max(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    hull = wh[..., 0] * wh[..., 1]
    return iou - (hull - union) / hull


def iou(box_a, box_b) -> float:
    """IoU of two ``(cx, cy, w, h)`` boxes as a plain float."""
    ax0, ay0 = box_a[0] - box_a[2] / 2, box_a[1] - box_a[3] / 2
    ax1, ay1 = box_a[0] + box_a[2] / 2, box_a[1] + box_a[3] / 2
    bx0, by0 = box_b[0] - box_b[2] / 2, box_b[1] - box_b[3] / 2
    bx1, by1 = box_b[0] + box_b[2] / 2, box_b[1] + box_b[3] / 2
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # min/max are symmetric, so iou(a, b) == iou(b, a) bit for bit
    union = box_a[2] * box_a[3] + box_b[2] * box_b[3] - inter
    return inter / union
