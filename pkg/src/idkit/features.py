"""Reference-image feature extraction.

The face adapter consumes per-image token features from a pluggable
backend. Two backends ship: a deterministic stub (grid mean-pool followed
by a fixed linear map) that the whole test suite runs on, and an optional
wrapper around a pretrained CLIP vision tower for people who want real
features at inference time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FeatureBackendError
from .rng import substream

__all__ = ["ImageFeatures", "StubFeatureExtractor", "PretrainedFeatureExtractor", "extract_image_features"]


@dataclass(frozen=True)
class ImageFeatures:
    """Token features of one reference image. tokens: [n_tokens, d_feat]."""

    tokens: np.ndarray
    source_id: str = "unknown"

    def __post_init__(self):
        t = self.tokens
        if t.ndim != 2 or t.shape[0] < 1 or t.shape[1] < 1:
            raise ValueError(f"tokens must be [n_tokens, d_feat] with both >= 1, got {t.shape}")
        if not np.isfinite(t).all():
            raise ValueError("tokens contain NaN/Inf")


@dataclass
class StubFeatureExtractor:
    """Deterministic toy backend: mean-pool a grid of patches, then apply a
    fixed bias-free linear map from RGB means to `d_feat` channels.

    `weight` is [3, d_feat]; when omitted it is drawn once from the seed.
    """

    grid: tuple[int, int] = (4, 4)
    d_feat: int = 8
    seed: int = 0
    weight: np.ndarray | None = field(default=None, repr=False)
    name: str = "stub"

    def __post_init__(self):
        if self.weight is None:
            rng = substream(self.seed, "adapter_init", 0xFEA7)
            self.weight = rng.standard_normal((3, self.d_feat)).astype(np.float32)
        else:
            self.weight = np.asarray(self.weight, dtype=np.float32)
            if self.weight.shape != (3, self.d_feat):
                raise ValueError(f"weight must be [3, {self.d_feat}], got {self.weight.shape}")

    @property
    def n_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def min_size(self) -> tuple[int, int]:
        return self.grid

    def extract(self, image: np.ndarray) -> np.ndarray:
        gh, gw = self.grid
        h, w, _ = image.shape
        # Grid cell boundaries; cells may differ by one pixel when the image
        # dimension is not divisible by the grid.
        ys = np.linspace(0, h, gh + 1).astype(int)
        xs = np.linspace(0, w, gw + 1).astype(int)
        means = np.empty((gh * gw, 3), dtype=np.float32)
        k = 0
        for i in range(gh):
            for j in range(gw):
                cell = image[ys[i]:ys[i + 1], xs[j]:xs[j + 1]]
                means[k] = cell.reshape(-1, 3).mean(axis=0)
                k += 1
        return means @ self.weight


class PretrainedFeatureExtractor:
    """Wrapper around a pretrained CLIP-style vision tower (optional).

    Requires `transformers` plus downloaded weights; never used by tests.
    """

    name = "pretrained"
    min_size = (1, 1)

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32"):
        try:
            import torch
            from transformers import CLIPImageProcessor, CLIPVisionModel
        except Exception as exc:  # pragma: no cover - optional path
            raise FeatureBackendError(f"pretrained extractor unavailable: {exc}") from exc
        self._torch = torch
        self.processor = CLIPImageProcessor.from_pretrained(model_name)
        self.model = CLIPVisionModel.from_pretrained(model_name).eval()
        self.n_tokens = (self.model.config.image_size // self.model.config.patch_size) ** 2 + 1
        self.d_feat = self.model.config.hidden_size

    def extract(self, image: np.ndarray) -> np.ndarray:  # pragma: no cover - optional path
        torch = self._torch
        pixels = self.processor(images=(image * 255).astype(np.uint8), return_tensors="pt").pixel_values
        with torch.no_grad():
            out = self.model(pixel_values=pixels).last_hidden_state[0]
        return out.numpy().astype(np.float32)


def extract_image_features(image: np.ndarray, extractor, source_id: str = "unknown") -> ImageFeatures:
    """Run `extractor` on a [H, W, 3] image with values in [0, 1]."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be [H, W, 3], got {image.shape}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    mh, mw = extractor.min_size
    if image.shape[0] < mh or image.shape[1] < mw:
        raise ValueError(f"image {image.shape[:2]} below extractor minimum {(mh, mw)}")
    try:
        tokens = extractor.extract(image)
    except Exception as exc:
        raise FeatureBackendError(f"extractor {getattr(extractor, 'name', '?')} failed: {exc}",
                                  source_id=source_id) from exc
    return ImageFeatures(tokens=np.asarray(tokens, dtype=np.float32), source_id=source_id)
