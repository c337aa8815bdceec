"""Clip extraction: temporal window, center crop, resize."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import SkipRecordError
from .corpus import RawVideo

__all__ = ["clip_and_resize", "save_clip", "load_clip"]


def clip_and_resize(video: RawVideo, clip_length: int = 16, size: int = 512,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """A contiguous clip_length window (seeded-random offset), center-cropped
    square on the longer dimension, resized to [clip_length, size, size, 3]."""
    n, h, w, _ = video.frames.shape
    if n < clip_length:
        raise SkipRecordError(f"{video.video_id}: {n} frames < clip length {clip_length}")
    offset = 0 if rng is None else int(rng.integers(0, n - clip_length + 1))
    frames = video.frames[offset:offset + clip_length]

    side = min(h, w)
    y0 = (h - side) // 2
    x0 = (w - side) // 2
    frames = frames[:, y0:y0 + side, x0:x0 + side]

    if side == size:
        return frames.astype(np.float32, copy=True)
    out = np.empty((clip_length, size, size, 3), dtype=np.float32)
    for i, frame in enumerate(frames):
        img = Image.fromarray((frame * 255.0 + 0.5).astype(np.uint8))
        out[i] = np.asarray(img.resize((size, size), Image.BILINEAR), dtype=np.float32) / 255.0
    return out


def save_clip(clip: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, clip.astype(np.float32))


def load_clip(path) -> np.ndarray:
    return np.load(Path(path))
