"""Visual prompt generator: CBAM refinement, query mapping, component-bank attention."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .types import FeatureMap


class CBAM(nn.Module):
    """Channel gate followed by spatial gate, both sigmoid-bounded."""

    def __init__(self, channels: int, reduction: int = 4, kernel_size: int = 7):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(nn.Linear(channels, hidden), nn.ReLU(), nn.Linear(hidden, channels))
        self.spatial = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def channel_gate(self, x: Tensor) -> Tensor:
        avg = self.mlp(x.mean(dim=(2, 3)))
        mx = self.mlp(x.amax(dim=(2, 3)))
        return torch.sigmoid(avg + mx)[:, :, None, None]

    def spatial_gate(self, x: Tensor) -> Tensor:
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.spatial(pooled))

    def forward(self, x: FeatureMap) -> FeatureMap:
        y = x.data * self.channel_gate(x.data)
        y = y * self.spatial_gate(y)
        return FeatureMap(y)


class PromptComponentBank(nn.Module):
    """Learnable prompt components (``fast``) with an EMA shadow (``slow``).

    Components are rows, ``[n_components, d_prompt]``. The optimizer owns
    ``fast``; the forward pass reads ``slow``.
    """

    def __init__(self, n_components: int, d_prompt: int, beta: float = 0.99, init_std: float = 0.02):
        super().__init__()
        if n_components < 1:
            raise ValueError("the component bank needs at least one component")
        check_beta(beta)
        self.beta = float(beta)
        self.fast = nn.Parameter(torch.randn(n_components, d_prompt) * init_std)
        self.register_buffer("slow", self.fast.detach().clone())

    @property
    def n_components(self) -> int:
        return self.fast.shape[0]

    @property
    def d_prompt(self) -> int:
        return self.fast.shape[1]

    def composed(self) -> Tensor:
        # forward value is exactly ``slow``; the gradient lands on ``fast``
        return self.slow.detach() + (self.fast - self.fast.detach())


def check_beta(beta: float) -> None:
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"EMA coefficient beta must lie in [0, 1], got {beta}")


@torch.no_grad()
def ema_update(bank: PromptComponentBank) -> PromptComponentBank:
    """``slow <- beta * slow + (1 - beta) * fast`` in place; returns the bank."""
    check_beta(bank.beta)
    bank.slow.mul_(bank.beta).add_(bank.fast.detach(), alpha=1.0 - bank.beta)
    return bank


@dataclass
class Prompt:
    weights: Tensor  # [B, n_p, M] attention over components
    raw: Tensor  # [B, n_p, D_p], convex combination of bank rows
    tokens: Tensor  # [B, n_p, D_model]


def generate_prompt(q: Tensor, bank: PromptComponentBank, temperature: float = 1.0) -> tuple[Tensor, Tensor]:
    """Attention-weighted sum of bank components.

    ``q`` is ``[..., D_p]``; it is L2-normalized before the dot product.
    Returns ``(weights [..., M], prompt [..., D_p])``.
    """
    if bank.n_components == 0:
        raise ValueError("empty component bank")
    if q.shape[-1] != bank.d_prompt:
        raise ValueError(f"query width {q.shape[-1]} does not match prompt dimension {bank.d_prompt}")
    comps = bank.composed()
    qn = F.normalize(q, dim=-1)
    weights = torch.softmax(qn @ comps.T / temperature, dim=-1)
    return weights, weights @ comps


class VisualPromptGenerator(nn.Module):
    def __init__(
        self,
        in_channels: int,
        d_model: int,
        d_prompt: int = 64,
        n_components: int = 8,
        n_prompt_tokens: int = 1,
        beta: float = 0.99,
        init_std: float = 0.02,
        temperature: float = 1.0,
        cbam_reduction: int = 4,
    ):
        super().__init__()
        self.n_prompt_tokens = n_prompt_tokens
        self.d_prompt = d_prompt
        self.temperature = temperature
        self.cbam = CBAM(in_channels, cbam_reduction)
        self.query_proj = nn.Linear(in_channels, n_prompt_tokens * d_prompt)
        self.bank = PromptComponentBank(n_components, d_prompt, beta, init_std)
        self.out_proj = nn.Linear(d_prompt, d_model)

    def feature_to_query(self, x: FeatureMap) -> Tensor:
        """Global-average-pool then linear map, ``[B, n_p, D_p]``."""
        pooled = x.data.mean(dim=(2, 3))
        return self.query_proj(pooled).view(-1, self.n_prompt_tokens, self.d_prompt)

    def forward(self, x: FeatureMap) -> Prompt:
        refined = self.cbam(x)
        q = self.feature_to_query(refined)
        weights, raw = generate_prompt(q, self.bank, self.temperature)
        return Prompt(weights, raw, self.out_proj(raw))

    def ema_update(self) -> None:
        ema_update(self.bank)
