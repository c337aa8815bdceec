"""Trainable face adapter.

The adapter is the only trainable part of the system: a set of latent
queries that attend over reference-image features to produce a fixed-size
identity token set, plus one image key/value projection pair per
cross-attention site of the (frozen) backbone. Image conditioning is
injected additively next to the text branch:

    out = attention(q, k_text, v_text) + lam * attention(q, k_image, v_image)

so the text path is computed exactly as the base model computes it, and
lam = 0 reproduces the base model bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, NumericsError, ShapeError
from .features import ImageFeatures
from .rng import normal32, substream

__all__ = [
    "AdapterConfig",
    "FaceTokens",
    "AttentionContext",
    "CrossAttentionWeights",
    "FaceAdapter",
    "attention",
    "decoupled_cross_attention",
    "encode_face",
    "mix_identities",
    "init_adapter",
]


@dataclass(frozen=True)
class AdapterConfig:
    n_queries: int = 16
    d_query: int = 32
    d_image: int = 8
    d_ctx: int = 16
    encoder_norm: bool = True
    lambda_default: float = 1.0
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "d_query": self.d_query,
            "d_image": self.d_image,
            "d_ctx": self.d_ctx,
            "encoder_norm": self.encoder_norm,
            "lambda_default": self.lambda_default,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AdapterConfig":
        return cls(**{k: d[k] for k in cls().to_dict()})


@dataclass
class FaceTokens:
    """Identity tokens [n_queries, d_ctx] plus (source_id, weight) provenance."""

    tokens: torch.Tensor
    provenance: list[tuple[str, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ShapeError(f"face tokens must be 2-D [n_queries, d_ctx], got {tuple(self.tokens.shape)}")
        if not torch.isfinite(self.tokens).all():
            raise NumericsError("face tokens contain NaN/Inf")


@dataclass
class AttentionContext:
    """Conditioning for one cross-attention call: text tokens, optional
    identity tokens, and the image-branch scale."""

    text_ctx: torch.Tensor
    image_ctx: FaceTokens | None = None
    lam: float = 1.0

    def __post_init__(self):
        if self.text_ctx.ndim != 2:
            raise ShapeError(f"text_ctx must be 2-D [n_text, d_ctx], got {tuple(self.text_ctx.shape)}")
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lam must be finite and >= 0, got {self.lam}")
        if self.image_ctx is not None and self.image_ctx.tokens.shape[-1] != self.text_ctx.shape[-1]:
            raise ShapeError(
                f"image tokens width {self.image_ctx.tokens.shape[-1]} != text width {self.text_ctx.shape[-1]}"
            )


@dataclass
class CrossAttentionWeights:
    """Projections for one attention site. Text-side weights belong to the
    frozen backbone; image-side weights, when present, to the adapter."""

    w_q: torch.Tensor
    w_k_text: torch.Tensor
    w_v_text: torch.Tensor
    w_k_image: torch.Tensor | None = None
    w_v_image: torch.Tensor | None = None


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Single-head scaled dot-product attention, softmax over keys."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = torch.matmul(q, k.transpose(-1, -2)) * scale
    return torch.matmul(torch.softmax(scores, dim=-1), v)


def _require_finite(name: str, t: torch.Tensor) -> None:
    if not torch.isfinite(t).all():
        raise NumericsError(f"{name} contains NaN/Inf")


def decoupled_cross_attention(z: torch.Tensor, ctx: AttentionContext,
                              weights: CrossAttentionWeights) -> torch.Tensor:
    """Text attention plus lam-scaled image attention over shared queries.

    z: [..., n_tokens, d_attn]. With lam = 0 or no image context the image
    branch is skipped entirely, so the output is the text-only result
    bit for bit.
    """
    d_attn = weights.w_q.shape[0]
    if z.shape[-1] != d_attn:
        raise ShapeError(f"z width {z.shape[-1]} != attention width {d_attn}")
    if ctx.text_ctx.shape[-1] != weights.w_k_text.shape[0]:
        raise ShapeError(
            f"text_ctx width {ctx.text_ctx.shape[-1]} != text key projection input {weights.w_k_text.shape[0]}"
        )
    _require_finite("z", z)
    _require_finite("text_ctx", ctx.text_ctx)

    q = torch.matmul(z, weights.w_q)
    k_t = torch.matmul(ctx.text_ctx, weights.w_k_text)
    v_t = torch.matmul(ctx.text_ctx, weights.w_v_text)
    out = attention(q, k_t, v_t)

    if ctx.image_ctx is None or ctx.lam == 0.0:
        return out
    if weights.w_k_image is None or weights.w_v_image is None:
        raise ConfigurationError("image context given but this site has no image projections")
    tokens = ctx.image_ctx.tokens
    if tokens.shape[-1] != weights.w_k_image.shape[0]:
        raise ShapeError(
            f"image tokens width {tokens.shape[-1]} != image key projection input {weights.w_k_image.shape[0]}"
        )
    _require_finite("image tokens", tokens)
    k_i = torch.matmul(tokens, weights.w_k_image)
    v_i = torch.matmul(tokens, weights.w_v_image)
    return out + ctx.lam * attention(q, k_i, v_i)


class FaceAdapter(nn.Module):
    """Latent-query identity encoder plus per-site image K/V projections."""

    def __init__(self, config: AdapterConfig, layer_widths: Mapping[str, int]):
        super().__init__()
        self.config = config
        self.layer_widths = dict(layer_widths)
        c = config
        self.latent_queries = nn.Parameter(torch.zeros(c.n_queries, c.d_query))
        self.to_q = nn.Parameter(torch.zeros(c.d_query, c.d_query))
        self.to_k = nn.Parameter(torch.zeros(c.d_image, c.d_query))
        self.to_v = nn.Parameter(torch.zeros(c.d_image, c.d_query))
        self.norm = nn.LayerNorm(c.d_query) if c.encoder_norm else None
        self.proj = nn.Parameter(torch.zeros(c.d_query, c.d_ctx))
        self.to_k_image = nn.ParameterDict(
            {lid: nn.Parameter(torch.zeros(c.d_ctx, w)) for lid, w in self.layer_widths.items()}
        )
        self.to_v_image = nn.ParameterDict(
            {lid: nn.Parameter(torch.zeros(c.d_ctx, w)) for lid, w in self.layer_widths.items()}
        )

    def encode(self, feature_tokens: torch.Tensor) -> torch.Tensor:
        """Map image features [n_tokens, d_image] to identity tokens
        [n_queries, d_ctx]: latent queries attend over the features, then a
        (optionally normalized) feed-forward projection narrows to d_ctx."""
        if feature_tokens.shape[-1] != self.config.d_image:
            raise ShapeError(
                f"feature dim {feature_tokens.shape[-1]} != encoder input dim {self.config.d_image}"
            )
        q = self.latent_queries @ self.to_q
        k = feature_tokens @ self.to_k
        v = feature_tokens @ self.to_v
        h = attention(q, k, v)
        if self.norm is not None:
            h = self.norm(h)
        return h @ self.proj

    def site_weights(self, layer_id: str) -> tuple[torch.Tensor, torch.Tensor]:
        return self.to_k_image[layer_id], self.to_v_image[layer_id]

    def null_tokens(self, dtype=torch.float32) -> FaceTokens:
        """All-zero identity tokens; the unconditional stand-in."""
        return FaceTokens(
            tokens=torch.zeros(self.config.n_queries, self.config.d_ctx, dtype=dtype),
            provenance=[("null", 1.0)],
        )


def encode_face(features: ImageFeatures, adapter: FaceAdapter) -> FaceTokens:
    """Encode extracted image features into identity tokens."""
    tokens = torch.from_numpy(np.ascontiguousarray(features.tokens))
    p = adapter.latent_queries
    if p.dtype != tokens.dtype:
        tokens = tokens.to(p.dtype)
    out = adapter.encode(tokens)
    return FaceTokens(tokens=out, provenance=[(features.source_id, 1.0)])


def mix_identities(tokens_list: Iterable[FaceTokens], mix_weights: Iterable[float]) -> FaceTokens:
    """Convex combination of identity token sets.

    Weights are normalized to sum to 1; a one-hot weight vector returns an
    exact copy of the surviving input.
    """
    tokens_list = list(tokens_list)
    weights = [float(w) for w in mix_weights]
    if not tokens_list:
        raise ValueError("tokens_list is empty")
    if len(weights) != len(tokens_list):
        raise ValueError(f"{len(weights)} weights for {len(tokens_list)} token sets")
    if any(w < 0 for w in weights):
        raise ValueError(f"mix weights must be nonnegative, got {weights}")
    total = sum(weights)
    if total <= 0:
        raise ValueError("mix weights sum to zero")
    shape = tokens_list[0].tokens.shape
    for ft in tokens_list[1:]:
        if ft.tokens.shape != shape:
            raise ShapeError(f"token shapes differ: {tuple(shape)} vs {tuple(ft.tokens.shape)}")
    norm = [w / total for w in weights]

    nonzero = [i for i, w in enumerate(norm) if w > 0]
    if len(nonzero) == 1:
        i = nonzero[0]
        src = tokens_list[i]
        return FaceTokens(tokens=src.tokens.clone(), provenance=[(s, w) for s, w in src.provenance])

    mixed = torch.zeros_like(tokens_list[0].tokens)
    provenance: list[tuple[str, float]] = []
    for w, ft in zip(norm, tokens_list):
        if w == 0:
            continue
        mixed = mixed + w * ft.tokens
        for src, sw in ft.provenance:
            provenance.append((src, w * sw))
    return FaceTokens(tokens=mixed, provenance=provenance)


def _parse_donor_key(key: str) -> tuple[str, str]:
    layer_id, _, kind = key.rpartition(".")
    return layer_id, kind


def init_adapter(spec, *, n_queries: int = 16, d_query: int = 32, d_image: int = 8,
                 encoder_norm: bool = True, lambda_default: float = 1.0, seed: int = 0,
                 donor: Mapping[str, np.ndarray] | None = None) -> FaceAdapter:
    """Build an adapter shaped for `spec`'s cross-attention sites.

    Without a donor, image value projections start at zero (the adapter is
    a strict no-op at step 0) and image key projections at N(0, 0.02).
    A donor map with keys "<layer_id>.k" / "<layer_id>.v" overrides the
    covered sites verbatim.
    """
    config = AdapterConfig(
        n_queries=n_queries, d_query=d_query, d_image=d_image, d_ctx=spec.d_ctx,
        encoder_norm=encoder_norm, lambda_default=lambda_default, seed=seed,
    )
    adapter = FaceAdapter(config, spec.cross_attention_widths())
    rng = substream(seed, "adapter_init")
    with torch.no_grad():
        adapter.latent_queries.copy_(torch.from_numpy(normal32(rng, adapter.latent_queries.shape)))
        for w in (adapter.to_q, adapter.to_k, adapter.to_v):
            w.copy_(torch.from_numpy(normal32(rng, w.shape, std=w.shape[0] ** -0.5)))
        # Loud output projection: Adam moves each weight by roughly lr per
        # step, so the image branch needs this much gain to shift the
        # prediction by O(1) within a short low-lr training budget.
        adapter.proj.copy_(torch.from_numpy(normal32(rng, adapter.proj.shape,
                                                     std=8.0 * config.d_query ** -0.5)))
        for lid in adapter.layer_widths:
            k = adapter.to_k_image[lid]
            k.copy_(torch.from_numpy(normal32(rng, k.shape, std=0.02)))
            # to_v_image stays zero: adapter output is exactly zero at step 0.

    if donor:
        bad_keys, bad_shapes = [], []
        with torch.no_grad():
            for key, value in donor.items():
                layer_id, kind = _parse_donor_key(key)
                table = {"k": adapter.to_k_image, "v": adapter.to_v_image}.get(kind)
                if table is None or layer_id not in adapter.layer_widths:
                    bad_keys.append(key)
                    continue
                value = torch.as_tensor(np.asarray(value), dtype=torch.float32)
                if tuple(value.shape) != tuple(table[layer_id].shape):
                    bad_shapes.append(f"{key}: donor {tuple(value.shape)} vs adapter {tuple(table[layer_id].shape)}")
                    continue
                table[layer_id].copy_(value)
        if bad_keys or bad_shapes:
            raise ConfigurationError(
                "donor rejected; unknown keys: " + (", ".join(bad_keys) or "none")
                + "; shape mismatches: " + ("; ".join(bad_shapes) or "none")
            )
    return adapter
