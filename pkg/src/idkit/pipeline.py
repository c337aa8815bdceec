"""End-to-end generation: checkpoint -> reference encoding -> guided
sampling -> decoded frames on disk."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .adapter import FaceAdapter, FaceTokens, encode_face, mix_identities
from .backbone import ConditionBundle, TextEmbedder, TinyVideoBackbone, noise_predictor
from .checkpoint import load_adapter
from .diffusion import GenerationConfig, LatentVideo, NoiseSchedule, cfg_sample, decode_latent
from .features import StubFeatureExtractor, extract_image_features

__all__ = ["load_image", "encode_references", "generate_video", "save_frames"]


def load_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr


def encode_references(adapter: FaceAdapter, extractor, ref_paths, mix_weights) -> FaceTokens | None:
    """Encode and (for several references) convexly mix identity tokens."""
    ref_paths = list(ref_paths)
    if not ref_paths:
        return None
    token_sets = []
    for p in ref_paths:
        feats = extract_image_features(load_image(p), extractor, source_id=str(p))
        token_sets.append(encode_face(feats, adapter))
    if len(token_sets) == 1:
        return token_sets[0]
    weights = list(mix_weights) if mix_weights else [1.0] * len(token_sets)
    return mix_identities(token_sets, weights)


def generate_video(checkpoint_path, config: GenerationConfig, *, extractor=None,
                   uncond_keep_face: bool = False) -> tuple[np.ndarray, LatentVideo]:
    """Sample a video conditioned on the prompt and reference face(s).

    The unconditional guidance branch uses the null text embedding and, by
    default, zeroed identity tokens; pass uncond_keep_face=True to null only
    the text side.
    """
    adapter, spec = load_adapter(checkpoint_path)
    if extractor is None:
        extractor = StubFeatureExtractor(d_feat=adapter.config.d_image)
    backbone = TinyVideoBackbone(spec)
    embedder = TextEmbedder(spec)
    sched = NoiseSchedule.linear(spec.n_steps)

    with torch.no_grad():
        tokens = encode_references(adapter, extractor, config.reference_images, config.mix_weights)
    cond = ConditionBundle(text_embedding=embedder.embed(config.prompt),
                           face_tokens=tokens, null_text=False)
    if tokens is None:
        uncond_tokens = None
    else:
        uncond_tokens = tokens if uncond_keep_face else adapter.null_tokens(dtype=tokens.tokens.dtype)
    uncond = ConditionBundle(text_embedding=embedder.null_embedding(),
                             face_tokens=uncond_tokens, null_text=True)

    predictor = noise_predictor(backbone, adapter if tokens is not None else None,
                                config.lambda_scale)
    latent = cfg_sample(config, sched, spec, predictor, cond, uncond)
    frames = decode_latent(latent, spec)
    return frames, latent


def save_frames(frames: np.ndarray, out_dir, gif: bool = True, frame_ms: int = 125) -> list[Path]:
    """Write numbered PNGs and an animated GIF preview; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    images = []
    for i, frame in enumerate(frames):
        img = Image.fromarray((frame * 255.0 + 0.5).astype(np.uint8))
        p = out_dir / f"frame_{i:03d}.png"
        img.save(p)
        paths.append(p)
        images.append(img)
    if gif and images:
        gif_path = out_dir / "preview.gif"
        images[0].save(gif_path, save_all=True, append_images=images[1:],
                       duration=frame_ms, loop=0)
        paths.append(gif_path)
    return paths
