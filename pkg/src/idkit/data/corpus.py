"""Synthetic video corpus with known ground truth.

Stands in for a real human-video dataset so the whole pipeline is testable
offline: each video is a dark textured background with one or two bright
colored disks ("faces") moving on smooth trajectories. The generator emits
exact per-frame face positions alongside the pixels, so detector, pool and
filter behavior can be checked against ground truth rather than eyeballed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..rng import substream

__all__ = [
    "RawVideo",
    "CorpusSpec",
    "render_video",
    "generate_synthetic_corpus",
    "write_corpus",
    "load_corpus_video",
    "load_ground_truth",
]


@dataclass
class RawVideo:
    """Source video frames [N, H, W, 3], float in [0, 1]."""

    frames: np.ndarray
    video_id: str

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4 or f.shape[3] != 3 or f.shape[0] < 1:
            raise ValueError(f"frames must be [N, H, W, 3] with N >= 1, got {f.shape}")
        if f.min() < 0.0 or f.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass(frozen=True)
class CorpusSpec:
    """Parameters of one synthetic corpus draw."""

    n_videos: int = 10
    n_multi_face: int = 3
    frames: int = 24
    height: int = 96
    width: int = 96
    radius_frac: float = 0.14
    seed: int = 0

    def __post_init__(self):
        if self.n_videos < 0 or not 0 <= self.n_multi_face <= self.n_videos:
            raise ValueError(f"bad corpus counts: {self.n_videos} videos, {self.n_multi_face} multi-face")

    @classmethod
    def from_json_file(cls, path) -> "CorpusSpec":
        d = json.loads(Path(path).read_text())
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown corpus spec fields: {sorted(unknown)}")
        return cls(**d)


def _disk_trajectory(rng: np.random.Generator, n: int, h: int, w: int, r: int,
                     x_range: tuple[float, float]) -> np.ndarray:
    """[n, 2] float centers (cy, cx); sinusoidal drift inside the given band."""
    lo, hi = x_range
    cx0 = rng.uniform(lo * w + r, hi * w - r)
    cy0 = rng.uniform(r, h - r)
    amp_x = rng.uniform(0, min(cx0 - lo * w - r, hi * w - r - cx0))
    amp_y = rng.uniform(0, min(cy0 - r, h - r - cy0))
    phase = rng.uniform(0, 2 * np.pi, size=2)
    ts = np.arange(n) / max(n - 1, 1)
    cx = cx0 + amp_x * np.sin(2 * np.pi * ts + phase[0])
    cy = cy0 + amp_y * np.sin(2 * np.pi * ts + phase[1])
    return np.stack([cy, cx], axis=1)


def render_video(video_id: str, n_frames: int, height: int, width: int,
                 face_tracks: list[np.ndarray], face_colors: list[np.ndarray],
                 radius: int, background: np.ndarray) -> tuple[RawVideo, dict]:
    """Rasterize disks over a static background; returns the video and its
    ground-truth entry. A track row of NaN means the face is absent in that
    frame, which is how partially-multi-face videos are built."""
    frames = np.empty((n_frames, height, width, 3), dtype=np.float32)
    yy, xx = np.mgrid[0:height, 0:width]
    per_frame = []
    for i in range(n_frames):
        frame = background.copy()
        faces_here = []
        for track, color in zip(face_tracks, face_colors):
            cy, cx = track[i]
            if np.isnan(cy):
                continue
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
            frame[mask] = color
            faces_here.append({
                "cy": float(cy), "cx": float(cx), "radius": int(radius),
                "color": [float(c) for c in color],
            })
        frames[i] = frame
        per_frame.append(faces_here)
    entry = {
        "video_id": video_id,
        "n_frames": n_frames,
        "height": height,
        "width": width,
        "multi_face": any(len(f) >= 2 for f in per_frame),
        "face_counts": [len(f) for f in per_frame],
        "faces": per_frame,
    }
    return RawVideo(frames=np.clip(frames, 0.0, 1.0), video_id=video_id), entry


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(0.05, 0.20, size=3).astype(np.float32)
    texture = rng.uniform(-0.03, 0.03, size=(h, w, 3)).astype(np.float32)
    return np.clip(base[None, None, :] + texture, 0.0, 0.35)


def _face_color(rng: np.random.Generator) -> np.ndarray:
    # Bright enough that luminance cleanly separates face from background.
    return rng.uniform(0.65, 1.0, size=3).astype(np.float32)


def generate_synthetic_corpus(spec: CorpusSpec) -> tuple[list[RawVideo], dict]:
    """Draw the corpus; multi-face videos come last in id order."""
    videos: list[RawVideo] = []
    ground_truth: dict = {"spec": {**spec.__dict__}, "videos": {}}
    radius = max(3, int(spec.radius_frac * min(spec.height, spec.width)))
    n_single = spec.n_videos - spec.n_multi_face
    for i in range(spec.n_videos):
        rng = substream(spec.seed, "corpus", i)
        video_id = f"vid{i:04d}"
        multi = i >= n_single
        bg = _background(rng, spec.height, spec.width)
        if multi:
            # Two disks confined to opposite halves so they never merge.
            tracks = [
                _disk_trajectory(rng, spec.frames, spec.height, spec.width, radius, (0.0, 0.48)),
                _disk_trajectory(rng, spec.frames, spec.height, spec.width, radius, (0.52, 1.0)),
            ]
            colors = [_face_color(rng), _face_color(rng)]
        else:
            tracks = [_disk_trajectory(rng, spec.frames, spec.height, spec.width, radius, (0.0, 1.0))]
            colors = [_face_color(rng)]
        video, entry = render_video(video_id, spec.frames, spec.height, spec.width,
                                    tracks, colors, radius, bg)
        videos.append(video)
        ground_truth["videos"][video_id] = entry
    return videos, ground_truth


def write_corpus(videos: list[RawVideo], ground_truth: dict, out_dir) -> None:
    out_dir = Path(out_dir)
    for video in videos:
        vdir = out_dir / "videos" / video.video_id
        vdir.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(video.frames):
            img = Image.fromarray((frame * 255.0 + 0.5).astype(np.uint8))
            img.save(vdir / f"frame_{i:05d}.png")
    (out_dir / "ground_truth.json").write_text(json.dumps(ground_truth, sort_keys=True, indent=1))


def load_corpus_video(corpus_dir, video_id: str) -> RawVideo:
    vdir = Path(corpus_dir) / "videos" / video_id
    paths = sorted(vdir.glob("frame_*.png"))
    if not paths:
        raise FileNotFoundError(f"no frames under {vdir}")
    frames = np.stack([np.asarray(Image.open(p), dtype=np.float32) / 255.0 for p in paths])
    return RawVideo(frames=frames, video_id=video_id)


def load_ground_truth(corpus_dir) -> dict:
    return json.loads((Path(corpus_dir) / "ground_truth.json").read_text())
