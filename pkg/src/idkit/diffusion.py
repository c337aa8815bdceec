"""Forward noising process, training loss, sampler, and the toy latent codec.

The forward process is the standard variance-preserving one:

    z_t = sqrt(alpha_bar[t]) * z + sqrt(1 - alpha_bar[t]) * eps

with alpha_bar[t] the product of (1 - beta) over the steps *before* t, so
alpha_bar[0] == 1 exactly and t counts completed noising steps. Sampling is
deterministic-seed ancestral denoising over a strided subset of the
schedule, with classifier-free guidance mixing of the conditional and
unconditional predictions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .backbone import BackboneSpec, ConditionBundle
from .errors import ShapeError
from .rng import normal32, substream

__all__ = [
    "NoiseSchedule",
    "LatentVideo",
    "TrainSample",
    "GenerationConfig",
    "forward_diffuse",
    "training_loss",
    "sampling_timesteps",
    "cfg_sample",
    "encode_frames",
    "decode_latent",
    "PIXEL_SCALE",
]

# decode: pixel = clip(latent * PIXEL_SCALE + 0.5); latents in [-2, 2] survive
# the round trip unclipped.
PIXEL_SCALE = 0.25

Predictor = Callable[[torch.Tensor, int, ConditionBundle], torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-process coefficients. betas[t] is the noise added going from
    t to t+1; alpha_bars is the exclusive cumulative product."""

    betas: np.ndarray
    alpha_bars: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 2:
            raise ValueError("betas must be a 1-D vector with at least 2 steps")
        if not ((betas > 0) & (betas < 1)).all():
            raise ValueError("betas must lie strictly in (0, 1)")
        alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas[:-1])])
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        ab = self.alpha_bars
        assert ((ab > 0) & (ab <= 1)).all() and (np.diff(ab) <= 0).all() and ab[0] > ab[-1]

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    @classmethod
    def linear(cls, n_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        return cls(betas=np.linspace(beta_start, beta_end, n_steps))


@dataclass
class LatentVideo:
    """T frames of latent pixels, [T, C, H, W]."""

    z: torch.Tensor
    frame_rate_hint: float | None = None

    def __post_init__(self):
        if self.z.ndim != 4 or self.z.shape[0] < 1:
            raise ShapeError(f"latent video must be [T, C, H, W] with T >= 1, got {tuple(self.z.shape)}")
        if not torch.isfinite(self.z).all():
            raise ValueError("latent video contains NaN/Inf")


def _unwrap(z) -> torch.Tensor:
    return z.z if isinstance(z, LatentVideo) else z


def forward_diffuse(z, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Noise a clean latent to step t."""
    zt = _unwrap(z)
    if eps.shape != zt.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != latent shape {tuple(zt.shape)}")
    if not 0 <= t < sched.n_steps:
        raise ValueError(f"t={t} outside [0, {sched.n_steps})")
    ab = float(sched.alpha_bars[t])
    return np.sqrt(ab) * zt + np.sqrt(1.0 - ab) * eps


@dataclass
class TrainSample:
    """One training example: clean latent, timestep, target noise, condition."""

    z: torch.Tensor
    t: int
    eps: torch.Tensor
    cond: ConditionBundle
    record_id: str = ""
    ref_crop_id: str = ""


def training_loss(batch: Sequence[TrainSample], predictor: Predictor,
                  sched: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between true and predicted noise over the batch."""
    if len(batch) == 0:
        raise ValueError("batch is empty")
    total_se = None
    total_n = 0
    for sample in batch:
        z_t = forward_diffuse(sample.z, sample.t, sample.eps, sched)
        eps_hat = predictor(z_t, sample.t, sample.cond)
        if eps_hat.shape != sample.eps.shape:
            raise ShapeError(f"eps_hat shape {tuple(eps_hat.shape)} != eps shape {tuple(sample.eps.shape)}")
        se = ((eps_hat - sample.eps) ** 2).sum()
        total_se = se if total_se is None else total_se + se
        total_n += sample.eps.numel()
    return total_se / total_n


def sampling_timesteps(n_steps: int, steps: int) -> np.ndarray:
    """Descending strided timestep sequence ending at 0."""
    if steps < 2:
        raise ValueError(f"need at least 2 sampling steps, got {steps}")
    if steps > n_steps:
        raise ValueError(f"schedule has {n_steps} steps < requested {steps} sampling steps")
    return np.linspace(0, n_steps - 1, steps).astype(int)[::-1]


@dataclass
class GenerationConfig:
    """Everything one generation run needs; serializes to/from JSON with the
    image-branch scale under the key "lambda"."""

    prompt: str
    reference_images: list[str] = field(default_factory=list)
    mix_weights: list[float] = field(default_factory=list)
    lambda_scale: float = 1.0
    guidance_scale: float = 7.5
    frames: int = 16
    steps: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.guidance_scale < 0:
            raise ValueError(f"guidance_scale must be >= 0, got {self.guidance_scale}")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.mix_weights and len(self.mix_weights) != len(self.reference_images):
            raise ValueError(
                f"{len(self.mix_weights)} mix weights for {len(self.reference_images)} reference images"
            )

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "reference_images": list(self.reference_images),
            "mix_weights": list(self.mix_weights),
            "lambda": self.lambda_scale,
            "guidance_scale": self.guidance_scale,
            "frames": self.frames,
            "steps": self.steps,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationConfig":
        d = dict(d)
        if "lambda" in d:
            d["lambda_scale"] = d.pop("lambda")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "GenerationConfig":
        return cls.from_dict(json.loads(text))


def _guided_eps(predictor: Predictor, z: torch.Tensor, t: int, cond: ConditionBundle,
                uncond: ConditionBundle, s: float) -> torch.Tensor:
    # s == 1 and s == 0 evaluate a single branch so the collapse identities
    # hold bit for bit, not merely to rounding.
    if s == 1.0:
        return predictor(z, t, cond)
    if s == 0.0:
        return predictor(z, t, uncond)
    eps_c = predictor(z, t, cond)
    eps_u = predictor(z, t, uncond)
    return eps_u + s * (eps_c - eps_u)


def cfg_sample(config: GenerationConfig, sched: NoiseSchedule, spec: BackboneSpec,
               predictor: Predictor, cond: ConditionBundle,
               uncond: ConditionBundle) -> LatentVideo:
    """Ancestral denoising from seeded pure noise with classifier-free
    guidance. Per-step noise comes from (seed, step-index) substreams, so
    trajectories with different guidance scales stay comparable."""
    taus = sampling_timesteps(sched.n_steps, config.steps)
    shape = (config.frames, spec.latent_channels, spec.latent_size, spec.latent_size)
    z = torch.from_numpy(normal32(substream(config.seed, "sample_init"), shape))
    s = float(config.guidance_scale)
    with torch.no_grad():
        for i in range(len(taus) - 1):
            t_cur, t_prev = int(taus[i]), int(taus[i + 1])
            eps_hat = _guided_eps(predictor, z, t_cur, cond, uncond, s)
            ab_cur = float(sched.alpha_bars[t_cur])
            ab_prev = float(sched.alpha_bars[t_prev])
            alpha = ab_cur / ab_prev
            mean = (z - (1.0 - alpha) / np.sqrt(1.0 - ab_cur) * eps_hat) / np.sqrt(alpha)
            sigma = np.sqrt((1.0 - ab_prev) / (1.0 - ab_cur) * (1.0 - alpha))
            noise = torch.from_numpy(normal32(substream(config.seed, "sample_noise", i), shape))
            z = mean + sigma * noise
    return LatentVideo(z=z)


def encode_frames(frames: np.ndarray, spec: BackboneSpec) -> torch.Tensor:
    """Pixel video [T, H, W, 3] in [0, 1] -> latent [T, 3, H/f, W/f]."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 4 or frames.shape[3] != 3:
        raise ShapeError(f"frames must be [T, H, W, 3], got {frames.shape}")
    if spec.latent_channels != 3:
        raise ShapeError(f"toy codec requires 3 latent channels, spec has {spec.latent_channels}")
    f = spec.spatial_factor
    t, h, w, _ = frames.shape
    if h % f or w % f:
        raise ShapeError(f"frame size {h}x{w} not divisible by spatial factor {f}")
    # Pool and rescale in float64; float32 accumulation alone costs ~1e-6.
    pooled = frames.astype(np.float64).reshape(t, h // f, f, w // f, f, 3).mean(axis=(2, 4))
    z = ((pooled - 0.5) / PIXEL_SCALE).astype(np.float32)
    return torch.from_numpy(np.ascontiguousarray(z.transpose(0, 3, 1, 2)))


def decode_latent(z, spec: BackboneSpec) -> np.ndarray:
    """Latent [T, 3, h, w] -> pixel video [T, h*f, w*f, 3] in [0, 1]."""
    zt = _unwrap(z)
    if zt.ndim != 4 or zt.shape[1] != 3:
        raise ShapeError(f"latent must be [T, 3, h, w], got {tuple(zt.shape)}")
    f = spec.spatial_factor
    arr = zt.detach().cpu().numpy().astype(np.float64).transpose(0, 2, 3, 1)
    arr = arr.repeat(f, axis=1).repeat(f, axis=2)
    return np.clip(arr * PIXEL_SCALE + 0.5, 0.0, 1.0).astype(np.float32)
