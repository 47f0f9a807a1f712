"""Tensor containers passed between the detector, prompt generator and losses."""
from __future__ import annotations

from dataclasses import dataclass, replace

import torch
from torch import Tensor

from .boxes import BoxLabel

ROLES = ("prompt", "domain_query", "image", "object_query")


@dataclass
class FeatureMap:
    """Backbone output, stored channels-first as ``[B, C, H, W]``."""

    data: Tensor

    def __post_init__(self):
        if self.data.dim() != 4:
            raise ValueError(f"FeatureMap expects [B, C, H, W], got shape {tuple(self.data.shape)}")
        if min(self.data.shape[1:]) < 1:
            raise ValueError(f"FeatureMap has an empty axis: {tuple(self.data.shape)}")

    @property
    def C(self) -> int:
        return self.data.shape[1]

    @property
    def H(self) -> int:
        return self.data.shape[2]

    @property
    def W(self) -> int:
        return self.data.shape[3]

    def tokens(self) -> Tensor:
        """Row-major flattening to ``[B, H*W, C]``."""
        return self.data.flatten(2).transpose(1, 2)


@dataclass
class TokenSequence:
    """Role-tagged token stream ``[B, T, D]``."""

    tokens: Tensor
    roles: tuple[str, ...]

    def __post_init__(self):
        self.roles = tuple(self.roles)
        if self.tokens.dim() != 3:
            raise ValueError(f"tokens must be [B, T, D], got {tuple(self.tokens.shape)}")
        if self.tokens.shape[1] != len(self.roles):
            raise ValueError(f"{self.tokens.shape[1]} tokens but {len(self.roles)} role tags")
        bad = set(self.roles) - set(ROLES)
        if bad:
            raise ValueError(f"unknown roles {sorted(bad)}")
        if self.roles.count("domain_query") > 1:
            raise ValueError("at most one domain_query token is allowed")
        if "prompt" in self.roles and "image" in self.roles:
            last_prompt = max(i for i, r in enumerate(self.roles) if r == "prompt")
            first_image = self.roles.index("image")
            if last_prompt > first_image:
                raise ValueError("prompt tokens must precede image tokens")

    @property
    def d_model(self) -> int:
        return self.tokens.shape[-1]

    def __len__(self) -> int:
        return len(self.roles)

    def role_mask(self, role: str) -> Tensor:
        return torch.tensor([r == role for r in self.roles], dtype=torch.bool, device=self.tokens.device)

    def select(self, role: str) -> Tensor:
        idx = [i for i, r in enumerate(self.roles) if r == role]
        return self.tokens[:, idx]

    def with_tokens(self, tokens: Tensor) -> "TokenSequence":
        return replace(self, tokens=tokens)


@dataclass
class DetectionSet:
    """Per-query class logits ``[..., N_q, K+1]`` and sigmoid boxes ``[..., N_q, 4]``.

    The last logit column is background. ``keep`` optionally marks the queries
    that survive pseudo-label filtering.
    """

    class_logits: Tensor
    boxes: Tensor
    keep: Tensor | None = None

    @property
    def num_classes(self) -> int:
        return self.class_logits.shape[-1] - 1

    @property
    def probs(self) -> Tensor:
        return self.class_logits.softmax(-1)

    @property
    def confidences(self) -> Tensor:
        return self.probs.max(-1).values

    @property
    def labels(self) -> Tensor:
        return self.probs.argmax(-1)

    def __len__(self) -> int:
        return self.class_logits.shape[0] if self.class_logits.dim() == 3 else 1

    def __getitem__(self, i: int) -> "DetectionSet":
        if self.class_logits.dim() != 3:
            raise TypeError("indexing needs a batched DetectionSet")
        keep = None if self.keep is None else self.keep[i]
        return DetectionSet(self.class_logits[i], self.boxes[i], keep)

    def split(self) -> list["DetectionSet"]:
        return [self[i] for i in range(len(self))]

    def detach(self) -> "DetectionSet":
        keep = None if self.keep is None else self.keep.detach()
        return DetectionSet(self.class_logits.detach(), self.boxes.detach(), keep)

    def scored_detections(self) -> list[tuple[int, float, tuple[float, ...]]]:
        """``(class_id, score, box)`` per (kept) query of a single image.

        The class is the best foreground class and the score its probability.
        """
        if self.class_logits.dim() != 2:
            raise TypeError("scored_detections works on a single-image DetectionSet")
        probs = self.probs[:, :-1].detach().double()
        scores, classes = probs.max(-1)
        boxes = self.boxes.detach().double().clamp(0.0, 1.0)
        out = []
        for q in range(probs.shape[0]):
            if self.keep is not None and not bool(self.keep[q]):
                continue
            out.append((int(classes[q]), float(scores[q]), tuple(float(v) for v in boxes[q])))
        return out


def to_box_label(class_id: int, box) -> BoxLabel:
    """Clamp a raw predicted box into ``BoxLabel`` bounds."""
    cx, cy, w, h = (float(v) for v in box)
    eps = 1e-6
    return BoxLabel(
        int(class_id),
        (min(max(cx, 0.0), 1.0), min(max(cy, 0.0), 1.0), min(max(w, eps), 1.0), min(max(h, eps), 1.0)),
    )
