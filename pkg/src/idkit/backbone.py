"""Frozen toy video-diffusion backbone.

A small UNet-ish denoiser over video latents that exposes the same
structural hooks a production text-to-video model would: per-level
cross-attention sites where an adapter can inject an image branch, and a
temporal mixing layer (attention across frames at each pixel) that adapter
code never touches. All backbone parameters are generated deterministically
from the spec seed and frozen; the backbone is a stand-in for a pretrained
model, not something this package trains.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .adapter import AttentionContext, CrossAttentionWeights, FaceAdapter, FaceTokens, attention, decoupled_cross_attention
from .errors import ConfigurationError, ShapeError
from .rng import normal32, substream

__all__ = [
    "BackboneSpec",
    "TextEmbedder",
    "TinyVideoBackbone",
    "ConditionBundle",
    "predict_noise",
    "noise_predictor",
    "backbone_checksum",
    "validate_adapter_layout",
    "time_embedding",
]


@dataclass(frozen=True)
class BackboneSpec:
    """Shape contract of the frozen backbone; hashed into checkpoints."""

    latent_channels: int = 3
    latent_size: int = 8
    frames: int = 8
    d_ctx: int = 16
    n_text: int = 8
    level_widths: tuple[int, ...] = (16, 32)
    time_dim: int = 16
    n_steps: int = 1000
    spatial_factor: int = 8
    skip_gain: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if len(self.level_widths) < 1:
            raise ValueError("need at least one level")
        if self.latent_size % (2 ** (len(self.level_widths) - 1)) != 0:
            raise ValueError(
                f"latent_size {self.latent_size} not divisible by the "
                f"{len(self.level_widths) - 1} downsampling steps"
            )

    @property
    def pixel_size(self) -> int:
        return self.latent_size * self.spatial_factor

    def cross_attention_widths(self) -> dict[str, int]:
        """Ordered layer_id -> attention width for every adapter-injectable site."""
        return {f"cross{i}": w for i, w in enumerate(self.level_widths)}

    @property
    def temporal_layer_id(self) -> str:
        # Single temporal mixing layer, placed after the deepest level.
        return "temporal0"

    def to_dict(self) -> dict:
        return {
            "latent_channels": self.latent_channels,
            "latent_size": self.latent_size,
            "frames": self.frames,
            "d_ctx": self.d_ctx,
            "n_text": self.n_text,
            "level_widths": list(self.level_widths),
            "time_dim": self.time_dim,
            "n_steps": self.n_steps,
            "spatial_factor": self.spatial_factor,
            "skip_gain": self.skip_gain,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d) -> "BackboneSpec":
        d = dict(d)
        d["level_widths"] = tuple(d["level_widths"])
        return cls(**d)

    def spec_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


class TextEmbedder:
    """Deterministic toy text encoder: each whitespace token maps to a fixed
    pseudo-random row keyed by its sha256; unused rows stay zero. The empty
    prompt therefore embeds to the all-zero matrix, which doubles as the
    null-text embedding."""

    def __init__(self, spec: BackboneSpec):
        self.n_text = spec.n_text
        self.d_ctx = spec.d_ctx

    def embed(self, prompt: str) -> torch.Tensor:
        out = np.zeros((self.n_text, self.d_ctx), dtype=np.float32)
        for i, token in enumerate(prompt.lower().split()[: self.n_text]):
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            out[i] = rng.standard_normal(self.d_ctx) * self.d_ctx ** -0.5
        return torch.from_numpy(out)

    def null_embedding(self) -> torch.Tensor:
        return self.embed("")


@dataclass
class ConditionBundle:
    """Conditioning for one denoiser call."""

    text_embedding: torch.Tensor
    face_tokens: FaceTokens | None = None
    null_text: bool = False

    @classmethod
    def null(cls, embedder: TextEmbedder, face_tokens: FaceTokens | None = None) -> "ConditionBundle":
        return cls(text_embedding=embedder.null_embedding(), face_tokens=face_tokens, null_text=True)

    def validate_against(self, embedder: TextEmbedder) -> None:
        if self.null_text and not torch.equal(
            self.text_embedding, embedder.null_embedding().to(self.text_embedding.dtype)
        ):
            raise ConfigurationError("null_text is set but text_embedding is not the null embedding")


def time_embedding(t: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal timestep embedding, [dim]."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = t * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)])
    if dim % 2:
        emb = np.concatenate([emb, [0.0]])
    return torch.as_tensor(emb, dtype=dtype)


class CrossAttentionSite(nn.Module):
    """Residual cross-attention over per-frame spatial tokens. The image
    branch, when an adapter supplies projections, is summed in before the
    output projection."""

    def __init__(self, layer_id: str, width: int, d_ctx: int):
        super().__init__()
        self.layer_id = layer_id
        self.width = width
        self.w_q = nn.Parameter(torch.zeros(width, width))
        self.w_k_text = nn.Parameter(torch.zeros(d_ctx, width))
        self.w_v_text = nn.Parameter(torch.zeros(d_ctx, width))
        self.w_o = nn.Parameter(torch.zeros(width, width))

    def forward(self, h: torch.Tensor, ctx: AttentionContext, adapter: FaceAdapter | None) -> torch.Tensor:
        t, c, hh, ww = h.shape
        tokens = h.permute(0, 2, 3, 1).reshape(t, hh * ww, c)
        if adapter is not None:
            k_img, v_img = adapter.site_weights(self.layer_id)
        else:
            k_img = v_img = None
        weights = CrossAttentionWeights(self.w_q, self.w_k_text, self.w_v_text, k_img, v_img)
        z_new = decoupled_cross_attention(tokens, ctx, weights)
        out = torch.matmul(z_new, self.w_o)
        return h + out.reshape(t, hh, ww, c).permute(0, 3, 1, 2)


class TemporalAttention(nn.Module):
    """Residual self-attention across frames, independently per pixel.
    Deliberately has no image-branch hook."""

    def __init__(self, width: int):
        super().__init__()
        self.w_q = nn.Parameter(torch.zeros(width, width))
        self.w_k = nn.Parameter(torch.zeros(width, width))
        self.w_v = nn.Parameter(torch.zeros(width, width))
        self.w_o = nn.Parameter(torch.zeros(width, width))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        t, c, hh, ww = h.shape
        tokens = h.permute(2, 3, 0, 1).reshape(hh * ww, t, c)
        out = attention(tokens @ self.w_q, tokens @ self.w_k, tokens @ self.w_v) @ self.w_o
        return h + out.reshape(hh, ww, t, c).permute(2, 3, 0, 1)


class TinyVideoBackbone(nn.Module):
    """Noise predictor over [T, C, H, W] video latents.

    Per level: 3x3 conv, timestep bias, SiLU, cross-attention site, then a
    2x average-pool between levels. One temporal mixing layer sits after the
    deepest level; a nearest-upsample path mirrors back to input resolution.
    """

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        widths = spec.level_widths
        chans = (spec.latent_channels,) + widths
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, padding=1) for i in range(len(widths))
        )
        self.time_proj = nn.ModuleList(nn.Linear(spec.time_dim, w) for w in widths)
        self.cross_sites = nn.ModuleList(
            CrossAttentionSite(lid, w, spec.d_ctx) for lid, w in spec.cross_attention_widths().items()
        )
        self.temporal = TemporalAttention(widths[-1])
        self.up_convs = nn.ModuleList(
            nn.Conv2d(widths[i + 1], widths[i], 3, padding=1) for i in reversed(range(len(widths) - 1))
        )
        self.out_conv = nn.Conv2d(widths[0], spec.latent_channels, 3, padding=1)
        self._init_deterministic(spec.seed)
        for p in self.parameters():
            p.requires_grad_(False)

    def _init_deterministic(self, seed: int) -> None:
        rng = substream(seed, "backbone_init")
        with torch.no_grad():
            for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
                if name.endswith("bias"):
                    p.zero_()
                else:
                    fan_in = int(np.prod(p.shape[1:])) if p.ndim > 1 else p.shape[0]
                    p.copy_(torch.from_numpy(normal32(rng, tuple(p.shape), std=fan_in ** -0.5)))

    def cross_layer_ids(self) -> list[str]:
        return [site.layer_id for site in self.cross_sites]

    def forward(self, z_t: torch.Tensor, t: int, ctx: AttentionContext,
                adapter: FaceAdapter | None = None) -> torch.Tensor:
        spec = self.spec
        if z_t.ndim != 4 or z_t.shape[1] != spec.latent_channels or z_t.shape[2] != z_t.shape[3]:
            raise ShapeError(
                f"latent must be [T, {spec.latent_channels}, S, S], got {tuple(z_t.shape)}"
            )
        if not 0 <= t < spec.n_steps:
            raise ValueError(f"t={t} outside [0, {spec.n_steps})")
        temb = time_embedding(t, spec.time_dim, dtype=z_t.dtype)
        h = z_t
        n = len(spec.level_widths)
        for i in range(n):
            h = self.convs[i](h)
            h = h + self.time_proj[i](temb)[None, :, None, None]
            h = F.silu(h)
            h = self.cross_sites[i](h, ctx, adapter)
            if i < n - 1:
                h = F.avg_pool2d(h, 2)
        h = self.temporal(h)
        for up in self.up_convs:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = F.silu(up(h))
        # Global input skip: a pretrained denoiser tracks its input closely at
        # high noise levels, and the toy stand-in should too.
        return self.out_conv(h) + spec.skip_gain * z_t


def validate_adapter_layout(backbone: TinyVideoBackbone, adapter: FaceAdapter) -> None:
    """Adapter projections must cover exactly the backbone's cross-attention
    sites; anything else (including hooks aimed at the temporal layer) is a
    wiring bug."""
    want = set(backbone.cross_layer_ids())
    have = set(adapter.layer_widths)
    if want != have:
        raise ConfigurationError(
            f"adapter sites {sorted(have)} != backbone cross-attention sites {sorted(want)}"
        )
    for lid, w in backbone.spec.cross_attention_widths().items():
        if adapter.layer_widths[lid] != w:
            raise ConfigurationError(
                f"site {lid}: adapter width {adapter.layer_widths[lid]} != backbone width {w}"
            )
    if adapter.config.d_ctx != backbone.spec.d_ctx:
        raise ConfigurationError(
            f"adapter d_ctx {adapter.config.d_ctx} != backbone d_ctx {backbone.spec.d_ctx}"
        )


def predict_noise(z_t: torch.Tensor, t: int, cond: ConditionBundle,
                  backbone: TinyVideoBackbone, adapter: FaceAdapter | None = None,
                  lam: float | None = None) -> torch.Tensor:
    """Denoiser forward pass with optional identity conditioning."""
    if cond.face_tokens is not None and adapter is None:
        raise ConfigurationError("condition carries face tokens but no adapter weights were given")
    if adapter is not None:
        validate_adapter_layout(backbone, adapter)
        if lam is None:
            lam = adapter.config.lambda_default
    use_image = cond.face_tokens is not None
    ctx = AttentionContext(
        text_ctx=cond.text_embedding,
        image_ctx=cond.face_tokens if use_image else None,
        lam=float(lam) if (use_image and lam is not None) else 0.0,
    )
    return backbone(z_t, t, ctx, adapter if use_image else None)


def noise_predictor(backbone: TinyVideoBackbone, adapter: FaceAdapter | None = None,
                    lam: float | None = None):
    """Close over weights; the result is the (z_t, t, cond) -> eps_hat callable
    that the loss and the sampler consume."""

    def predict(z_t: torch.Tensor, t: int, cond: ConditionBundle) -> torch.Tensor:
        return predict_noise(z_t, t, cond, backbone, adapter, lam)

    return predict


def backbone_checksum(backbone: TinyVideoBackbone) -> str:
    """sha256 over all parameters, in name order. Training must not move it."""
    h = hashlib.sha256()
    for name, p in sorted(backbone.named_parameters(), key=lambda kv: kv[0]):
        h.update(name.encode("utf-8"))
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()
