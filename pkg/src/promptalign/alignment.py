"""Adversarial feature alignment: gradient reversal, discriminators and the
global (domain-query) and instance-aware alignment losses.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .boxes import BoxLabel
from .matching import Assignment
from .types import DetectionSet, to_box_label

SOURCE = 0
TARGET = 1
PROB_EPS = 1e-7


class _GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, strength):
        ctx.strength = strength
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.strength, None


def gradient_reversal(x: Tensor, strength: float = 1.0) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-strength``."""
    return _GradientReversal.apply(x, float(strength))


def check_domain_label(label: int) -> int:
    if label not in (SOURCE, TARGET):
        raise ValueError(f"domain label must be 0 (source) or 1 (target), got {label!r}")
    return label


def domain_bce(prob: Tensor, label: int) -> Tensor:
    """Elementwise ``-(t log p + (1 - t) log(1 - p))`` with ``p`` clamped away from 0 and 1."""
    t = check_domain_label(label)
    p = prob.clamp(PROB_EPS, 1 - PROB_EPS)
    return -(t * torch.log(p) + (1 - t) * torch.log(1 - p))


class Discriminator(nn.Module):
    """Two-layer probability head over a single embedding."""

    def __init__(self, d_in: int, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(d_in, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, x: Tensor) -> Tensor:
        return torch.sigmoid(self.fc2(F.relu(self.fc1(x)))).squeeze(-1)


class DomainDiscriminators(nn.Module):
    """Global (domain-query) and instance discriminators for encoder and decoder."""

    def __init__(self, d_model: int, hidden: int = 64):
        super().__init__()
        self.enc_global = Discriminator(d_model, hidden)
        self.dec_global = Discriminator(d_model, hidden)
        self.enc_instance = Discriminator(d_model, hidden)
        self.dec_instance = Discriminator(d_model, hidden)


@dataclass(frozen=True)
class AdvLossWeights:
    dqfa_enc: float = 1.0
    dqfa_dec: float = 1.0
    tiafa_enc: float = 1.0
    tiafa_dec: float = 1.0
    tau: float = 0.7
    grl_lambda: float = 1.0

    def __post_init__(self):
        for name in ("dqfa_enc", "dqfa_dec", "tiafa_enc", "tiafa_dec", "grl_lambda"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")


def dqfa_loss(
    enc_domain_token: Tensor | None,
    dec_domain_token: Tensor | None,
    label: int,
    w: AdvLossWeights,
    discs: DomainDiscriminators,
    strength: float = 1.0,
) -> Tensor:
    """Weighted encoder + decoder domain-query adversarial loss, batch mean.

    Tokens are ``[B, D]`` final-layer domain-query outputs; the reversal is
    applied here.
    """
    if enc_domain_token is None or dec_domain_token is None:
        raise ValueError("domain-query alignment needs domain-query tokens in encoder and decoder")
    p_enc = discs.enc_global(gradient_reversal(enc_domain_token, strength))
    p_dec = discs.dec_global(gradient_reversal(dec_domain_token, strength))
    return w.dqfa_enc * domain_bce(p_enc, label).mean() + w.dqfa_dec * domain_bce(p_dec, label).mean()


def compute_soft_mask(memory_image_tokens: Tensor, matched_queries: Tensor, eps: float = 1e-12) -> Tensor | None:
    """Per-token relevance ``sigmoid(mean_i <z_k, Q_i>)`` with both sides L2-normalized.

    ``memory_image_tokens`` is ``[N_enc, D]`` and ``matched_queries`` ``[M, D]``.
    Returns ``None`` when no usable (non-zero) matched query exists, meaning the
    encoder instance term is skipped for this sample.
    """
    if matched_queries.shape[0] == 0:
        return None
    norms = matched_queries.norm(dim=-1)
    usable = norms > eps
    if not bool(usable.any()):
        return None
    q = matched_queries[usable] / norms[usable, None]
    z = F.normalize(memory_image_tokens, dim=-1, eps=eps)
    raw = (z @ q.T).mean(dim=1)
    return torch.sigmoid(raw)


def tiafa_encoder_loss(
    memory_image_tokens: Tensor,
    mask: Tensor,
    label: int,
    disc: Discriminator,
    strength: float = 1.0,
) -> Tensor:
    """Mean domain BCE over mask-scaled encoder image tokens of one sample."""
    if mask.shape[0] != memory_image_tokens.shape[0]:
        raise ValueError(f"mask length {mask.shape[0]} != {memory_image_tokens.shape[0]} encoder tokens")
    z = gradient_reversal(memory_image_tokens, strength)
    probs = disc(mask[:, None] * z)
    return domain_bce(probs, label).mean()


def decoder_foreground_weights(assignment: Assignment, n_queries: int) -> Tensor:
    w = torch.zeros(n_queries)
    for q in assignment.query_indices:
        w[q] = 1.0
    return w


def tiafa_decoder_loss(
    decoded_queries: Tensor,
    weights: Tensor,
    label: int,
    disc: Discriminator,
    strength: float = 1.0,
) -> Tensor:
    """Domain BCE averaged over the foreground (weight 1) queries of one sample."""
    fg = weights > 0
    if not bool(fg.any()):
        return decoded_queries.new_zeros(())
    q = gradient_reversal(decoded_queries, strength)
    w = weights.to(q.dtype)
    probs = disc(w[fg, None] * q[fg])
    return domain_bce(probs, label).mean()


def total_adversarial_loss(parts: dict[str, Tensor], w: AdvLossWeights) -> Tensor:
    """``L_adv = L_dqfa + lambda1 * L_enc_inst + lambda2 * L_dec_inst``.

    ``parts`` may hold ``dqfa`` (already weighted), ``tiafa_enc`` and
    ``tiafa_dec`` (unweighted). Missing entries count as zero. Gradient
    reversal supplies the adversarial sign, so the training objective is
    ``L_det + L_adv``.
    """
    total = None
    terms = [
        (parts.get("dqfa"), 1.0),
        (parts.get("tiafa_enc"), w.tiafa_enc),
        (parts.get("tiafa_dec"), w.tiafa_dec),
    ]
    for value, weight in terms:
        if value is None:
            continue
        term = weight * value
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total


def confident_queries(detections: DetectionSet, tau: float) -> list[int]:
    """Indices of non-background queries of one image with confidence >= ``tau``.

    Ordered by descending confidence, ties broken by query index.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    probs = detections.probs.detach()
    if probs.dim() != 2:
        raise TypeError("expected a single-image DetectionSet")
    conf, cls = probs.max(-1)
    background = probs.shape[-1] - 1
    keep = [q for q in range(probs.shape[0]) if int(cls[q]) != background and float(conf[q]) >= tau]
    keep.sort(key=lambda q: (-float(conf[q]), q))
    return keep


def filter_pseudo_labels(detections: DetectionSet, tau: float) -> list[BoxLabel]:
    """High-confidence foreground predictions of one image as ``BoxLabel``s."""
    keep = confident_queries(detections, tau)
    cls = detections.probs.detach().argmax(-1)
    boxes = detections.boxes.detach()
    return [to_box_label(int(cls[q]), boxes[q].tolist()) for q in keep]
