"""Miniature DETR-family detector with optional prompt and domain-query tokens."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .types import DetectionSet, FeatureMap, TokenSequence
from .vpg import Prompt, VisualPromptGenerator


@dataclass
class ModelConfig:
    num_classes: int = 3
    image_size: int = 64
    backbone_channels: tuple[int, ...] = (32, 64, 64)
    d_model: int = 64
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 128
    n_queries: int = 10
    # prompt generator
    d_prompt: int = 64
    n_components: int = 8
    n_prompt_tokens: int = 1
    beta: float = 0.99
    bank_init_std: float = 0.02
    prompt_temperature: float = 1.0
    # the edge detector carries no prompt / domain-query parameters
    adaptation_modules: bool = True

    def __post_init__(self):
        self.backbone_channels = tuple(self.backbone_channels)
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.image_size % self.stride:
            raise ValueError(f"image_size={self.image_size} not divisible by stride {self.stride}")

    @property
    def stride(self) -> int:
        return 2 ** len(self.backbone_channels)

    @property
    def grid(self) -> int:
        return self.image_size // self.stride

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d


class Backbone(nn.Module):
    """Stack of 3x3 stride-2 convolutions; output stride ``2 ** n_layers``."""

    def __init__(self, channels: tuple[int, ...]):
        super().__init__()
        layers = []
        c_in = 3
        for c_out in channels:
            layers.append(nn.Conv2d(c_in, c_out, 3, stride=2, padding=1))
            c_in = c_out
        self.convs = nn.ModuleList(layers)
        self.out_channels = c_in

    def forward(self, images: Tensor) -> FeatureMap:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected images [B, 3, H, W], got {tuple(images.shape)}")
        if not torch.isfinite(images).all():
            raise ValueError("backbone input contains non-finite values")
        x = images
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.relu(x)
        return FeatureMap(x)


def sine_position_encoding(h: int, w: int, d_model: int, temperature: float = 10000.0) -> Tensor:
    """Fixed 2-D sinusoidal encoding, ``[h*w, d_model]``, row-major like ``FeatureMap.tokens``."""
    if d_model % 4:
        raise ValueError("d_model must be divisible by 4 for 2-D sine encodings")
    n = d_model // 4
    omega = 1.0 / temperature ** (torch.arange(n, dtype=torch.float64) / n)
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij")
    ys = (ys.flatten() + 0.5) / h * 2 * math.pi
    xs = (xs.flatten() + 0.5) / w * 2 * math.pi
    out_y = ys[:, None] * omega[None]
    out_x = xs[:, None] * omega[None]
    pe = torch.cat([out_y.sin(), out_y.cos(), out_x.sin(), out_x.cos()], dim=1)
    return pe.float()


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(self, query: Tensor, key: Tensor, value: Tensor, blocked: Tensor | None = None) -> Tensor:
        """``blocked`` is a bool ``[Tq, Tk]`` mask; True entries get zero attention."""
        b, tq, d = query.shape
        tk = key.shape[1]
        h = self.n_heads
        dh = d // h
        q = self.q_proj(query).view(b, tq, h, dh).transpose(1, 2)
        k = self.k_proj(key).view(b, tk, h, dh).transpose(1, 2)
        v = self.v_proj(value).view(b, tk, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(dh)
        if blocked is not None:
            scores = scores.masked_fill(blocked, float("-inf"))
        attn = scores.softmax(-1)
        out = (attn @ v).transpose(1, 2).reshape(b, tq, d)
        return self.out_proj(out)


class EncoderLayer(nn.Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, d_model: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.linear1 = nn.Linear(d_model, ffn_dim)
        self.linear2 = nn.Linear(ffn_dim, d_model)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, x: Tensor, blocked: Tensor | None = None) -> Tensor:
        h = self.norm1(x)
        x = x + self.self_attn(h, h, h, blocked)
        return x + self.linear2(F.relu(self.linear1(self.norm2(x))))


class DecoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.linear1 = nn.Linear(d_model, ffn_dim)
        self.linear2 = nn.Linear(ffn_dim, d_model)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)

    def forward(self, tgt: Tensor, memory: Tensor) -> Tensor:
        h = self.norm1(tgt)
        tgt = tgt + self.self_attn(h, h, h)
        h = self.norm2(tgt)
        tgt = tgt + self.cross_attn(h, memory, memory)
        return tgt + self.linear2(F.relu(self.linear1(self.norm3(tgt))))


class Encoder(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffn_dim: int, n_layers: int):
        super().__init__()
        self.d_model = d_model
        self.layers = nn.ModuleList(EncoderLayer(d_model, n_heads, ffn_dim) for _ in range(n_layers))
        self.norm = nn.LayerNorm(d_model) if n_layers else None

    def forward(self, seq: TokenSequence, isolate_extra: bool = False) -> TokenSequence:
        """Full self-attention over every token; roles are carried through unchanged.

        ``isolate_extra`` blocks attention between image tokens and the prompt /
        domain-query tokens in both directions. It exists as a control that
        reduces the image stream to a plain encoder.
        """
        if seq.d_model != self.d_model:
            raise ValueError(f"token width {seq.d_model} does not match encoder width {self.d_model}")
        if "image" not in seq.roles:
            raise ValueError("encoder input has no image tokens")
        blocked = None
        if isolate_extra:
            is_img = seq.role_mask("image")
            blocked = is_img[:, None] ^ is_img[None, :]
        x = seq.tokens
        for layer in self.layers:
            x = layer(x, blocked)
        if self.norm is not None:
            x = self.norm(x)
        return seq.with_tokens(x)


class Decoder(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffn_dim: int, n_layers: int):
        super().__init__()
        self.d_model = d_model
        self.layers = nn.ModuleList(DecoderLayer(d_model, n_heads, ffn_dim) for _ in range(n_layers))

    def forward(self, queries: TokenSequence, memory: TokenSequence) -> TokenSequence:
        """Self-attention among queries, cross-attention to the image tokens of ``memory`` only."""
        if len(memory) == 0 or "image" not in memory.roles:
            raise ValueError("decoder memory has no image tokens")
        if queries.d_model != self.d_model or memory.d_model != self.d_model:
            raise ValueError("decoder width mismatch")
        mem = memory.select("image")
        x = queries.tokens
        for layer in self.layers:
            x = layer(x, mem)
        return queries.with_tokens(x)


class PredictionHeads(nn.Module):
    def __init__(self, d_model: int, num_classes: int):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.class_head = nn.Linear(d_model, num_classes + 1)
        self.box_hidden = nn.Linear(d_model, d_model)
        self.box_out = nn.Linear(d_model, 4)

    def forward(self, decoded: TokenSequence) -> DetectionSet:
        q = decoded.select("object_query")
        if q.shape[1] == 0:
            raise ValueError("no object_query tokens to decode")
        q = self.norm(q)
        logits = self.class_head(q)
        boxes = torch.sigmoid(self.box_out(F.relu(self.box_hidden(q))))
        return DetectionSet(logits, boxes)


@dataclass
class DetectorOutput:
    features: FeatureMap
    memory: TokenSequence
    decoded: TokenSequence
    detections: DetectionSet
    prompt: Prompt | None = None
    extras: dict = field(default_factory=dict)

    def domain_token(self, which: str) -> Tensor | None:
        seq = self.memory if which == "enc" else self.decoded
        if "domain_query" not in seq.roles:
            return None
        return seq.select("domain_query")[:, 0]


class Detector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.backbone = Backbone(cfg.backbone_channels)
        self.input_proj = nn.Linear(self.backbone.out_channels, d)
        self.encoder = Encoder(d, cfg.n_heads, cfg.ffn_dim, cfg.enc_layers)
        self.decoder = Decoder(d, cfg.n_heads, cfg.ffn_dim, cfg.dec_layers)
        self.heads = PredictionHeads(d, cfg.num_classes)
        self.query_embed = nn.Parameter(torch.randn(cfg.n_queries, d))
        self.register_buffer("image_pos", sine_position_encoding(cfg.grid, cfg.grid, d), persistent=False)
        if cfg.adaptation_modules:
            # domain queries are learned embeddings, so they carry their own position
            self.domain_query_enc = nn.Parameter(torch.randn(1, d) * 0.02)
            self.domain_query_dec = nn.Parameter(torch.randn(1, d) * 0.02)
            self.prompt_pos = nn.Parameter(torch.randn(cfg.n_prompt_tokens, d) * 0.02)
            self.vpg = VisualPromptGenerator(
                self.backbone.out_channels,
                d,
                d_prompt=cfg.d_prompt,
                n_components=cfg.n_components,
                n_prompt_tokens=cfg.n_prompt_tokens,
                beta=cfg.beta,
                init_std=cfg.bank_init_std,
                temperature=cfg.prompt_temperature,
            )

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def detector_parameters(self):
        """Everything except the prompt generator."""
        return [p for n, p in self.named_parameters() if not n.startswith("vpg.")]

    def build_encoder_input(self, features: FeatureMap, prompt: Prompt | None, use_domain_query: bool) -> TokenSequence:
        """``[prompt..., domain_query?, image...]``; positions are added to token content."""
        b = features.data.shape[0]
        img = self.input_proj(features.tokens())
        img_pos = self.image_pos.to(img.dtype)
        if img.shape[1] != img_pos.shape[0]:
            raise ValueError(f"feature grid {features.H}x{features.W} does not match configured {self.cfg.grid}")
        parts, roles = [], []
        if prompt is not None:
            n_p = prompt.tokens.shape[1]
            parts.append(prompt.tokens + self.prompt_pos[:n_p])
            roles += ["prompt"] * n_p
        if use_domain_query:
            parts.append(self.domain_query_enc.expand(b, -1, -1))
            roles.append("domain_query")
        parts.append(img + img_pos)
        roles += ["image"] * img.shape[1]
        return TokenSequence(torch.cat(parts, 1), tuple(roles))

    def build_decoder_input(self, batch: int, use_domain_query: bool) -> TokenSequence:
        tokens = [self.query_embed.expand(batch, -1, -1)]
        roles = ["object_query"] * self.cfg.n_queries
        if use_domain_query:
            tokens.insert(0, self.domain_query_dec.expand(batch, -1, -1))
            roles.insert(0, "domain_query")
        return TokenSequence(torch.cat(tokens, 1), tuple(roles))

    def forward(
        self,
        images: Tensor,
        use_prompt: bool = False,
        use_domain_query: bool = False,
        isolate_extra: bool = False,
    ) -> DetectorOutput:
        if (use_prompt or use_domain_query) and not self.cfg.adaptation_modules:
            raise ValueError("this detector was built without prompt/domain-query modules")
        features = self.backbone(images)
        prompt = self.vpg(features) if use_prompt else None
        enc_in = self.build_encoder_input(features, prompt, use_domain_query)
        memory = self.encoder(enc_in, isolate_extra=isolate_extra)
        queries = self.build_decoder_input(images.shape[0], use_domain_query)
        decoded = self.decoder(queries, memory)
        detections = self.heads(decoded)
        return DetectorOutput(features, memory, decoded, detections, prompt)


def edge_config(cloud: ModelConfig, **overrides) -> ModelConfig:
    """Reduced-width, reduced-depth sibling of a cloud configuration."""
    base = dict(
        num_classes=cloud.num_classes,
        image_size=cloud.image_size,
        backbone_channels=tuple(max(c // 2, 4) for c in cloud.backbone_channels),
        d_model=max(cloud.d_model // 2, 8),
        n_heads=max(cloud.n_heads // 2, 1),
        enc_layers=max(cloud.enc_layers - 1, 1),
        dec_layers=max(cloud.dec_layers - 1, 1),
        ffn_dim=max(cloud.ffn_dim // 2, 8),
        n_queries=cloud.n_queries,
        adaptation_modules=False,
    )
    base.update(overrides)
    return ModelConfig(**base)
