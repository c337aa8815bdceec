"""Face detection, cropping, and per-video face pools.

The detector interface is pluggable; the one that ships finds the bright
disks planted by the synthetic corpus via luminance thresholding and
connected components. Pool construction follows a shuffle-and-reject rule:
walk the frames in a seeded random order, keep square crops from frames
with exactly one detection, discard frames with more, and stop after
pool_target crops or max_attempts frames.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from ..errors import DetectorError, EmptyPoolError
from .corpus import RawVideo

__all__ = [
    "FaceBox",
    "FacePool",
    "SyntheticDiskDetector",
    "detect_faces",
    "crop_face",
    "build_face_pool",
    "sample_reference_index",
    "sample_random_reference",
    "save_pool",
    "load_pool",
]


@dataclass(frozen=True)
class FaceBox:
    """Axis-aligned detection; x1/y1 exclusive."""

    frame_index: int
    x0: int
    y0: int
    x1: int
    y1: int
    confidence: float

    def __post_init__(self):
        if not (0 <= self.x0 < self.x1 and 0 <= self.y0 < self.y1):
            raise ValueError(f"degenerate box {(self.x0, self.y0, self.x1, self.y1)}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class SyntheticDiskDetector:
    """Finds bright connected blobs against the corpus's dark backgrounds."""

    threshold: float = 0.45
    min_area: int = 12
    name: str = "synthetic-disk"

    def detect(self, frame: np.ndarray) -> list[tuple[int, int, int, int, float]]:
        luma = frame @ np.array([0.299, 0.587, 0.114], dtype=frame.dtype)
        labels, n = ndimage.label(luma > self.threshold)
        boxes = []
        for slc in ndimage.find_objects(labels):
            if slc is None:
                continue
            ys, xs = slc
            area = (ys.stop - ys.start) * (xs.stop - xs.start)
            if area < self.min_area:
                continue
            conf = float(np.clip(luma[ys, xs].mean(), 0.0, 1.0))
            boxes.append((xs.start, ys.start, xs.stop, ys.stop, conf))
        return boxes


def detect_faces(frame: np.ndarray, detector, frame_index: int = 0) -> list[FaceBox]:
    """Run the detector on one frame; boxes sorted by confidence, best first."""
    if frame.min() < 0.0 or frame.max() > 1.0:
        raise ValueError("frame pixels must lie in [0, 1]")
    try:
        raw = detector.detect(frame)
    except Exception as exc:
        raise DetectorError(f"detector {getattr(detector, 'name', '?')} failed: {exc}",
                            frame_index=frame_index) from exc
    boxes = [FaceBox(frame_index, x0, y0, x1, y1, conf) for x0, y0, x1, y1, conf in raw]
    return sorted(boxes, key=lambda b: -b.confidence)


def crop_face(frame: np.ndarray, box: FaceBox, ref_size: int, margin: float = 0.2) -> np.ndarray:
    """Square crop around the box with `margin` padding per side, clamped to
    the frame, resized to [ref_size, ref_size, 3]."""
    h, w, _ = frame.shape
    side = max(box.x1 - box.x0, box.y1 - box.y0) * (1.0 + 2.0 * margin)
    side = int(round(min(side, h, w)))
    side = max(side, 1)
    cx = (box.x0 + box.x1) / 2.0
    cy = (box.y0 + box.y1) / 2.0
    x0 = int(round(cx - side / 2.0))
    y0 = int(round(cy - side / 2.0))
    x0 = min(max(x0, 0), w - side)
    y0 = min(max(y0, 0), h - side)
    patch = frame[y0:y0 + side, x0:x0 + side]
    if side == ref_size:
        return patch.astype(np.float32)
    img = Image.fromarray((patch * 255.0 + 0.5).astype(np.uint8))
    img = img.resize((ref_size, ref_size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


@dataclass
class FacePool:
    """Single-face crops for one video, with their provenance.

    `attempts` is the detection evidence from construction: (frame index,
    faces seen), one entry per inspected frame. Downstream multi-face
    filtering reuses it instead of re-running detection.
    """

    video_id: str
    crops: list[np.ndarray]
    source_frames: list[int]
    boxes: list[FaceBox] = field(default_factory=list)
    ref_size: int = 224
    attempts: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.crops) != len(self.source_frames):
            raise ValueError("crops and source_frames length mismatch")
        if len(set(self.source_frames)) != len(self.source_frames):
            raise ValueError(f"pool frames must be distinct, got {self.source_frames}")

    def __len__(self) -> int:
        return len(self.crops)


def build_face_pool(video: RawVideo, rng: np.random.Generator, pool_target: int = 5,
                    max_attempts: int | None = None, detector=None, ref_size: int = 224,
                    margin: float = 0.2) -> FacePool:
    """Shuffle the frames, crop faces from the first frames that show exactly
    one detection, and reject the rest. Raises EmptyPoolError (carrying the
    attempt evidence) when nothing usable turns up in the budget."""
    if pool_target < 1:
        raise ValueError("pool_target must be >= 1")
    detector = detector if detector is not None else SyntheticDiskDetector()
    if max_attempts is None:
        max_attempts = 3 * pool_target
    order = rng.permutation(video.n_frames)
    crops, frames_used, boxes = [], [], []
    attempts: list[tuple[int, int]] = []
    for frame_index in order[:max_attempts]:
        frame_index = int(frame_index)
        found = detect_faces(video.frames[frame_index], detector, frame_index)
        attempts.append((frame_index, len(found)))
        if len(found) != 1:
            continue
        box = found[0]
        crops.append(crop_face(video.frames[frame_index], box, ref_size, margin))
        frames_used.append(frame_index)
        boxes.append(box)
        if len(crops) == pool_target:
            break
    if not crops:
        err = EmptyPoolError(
            f"{video.video_id}: no single-face frame in {len(attempts)} attempts"
        )
        err.attempts = attempts
        raise err
    return FacePool(video_id=video.video_id, crops=crops, source_frames=frames_used,
                    boxes=boxes, ref_size=ref_size, attempts=attempts)


def sample_reference_index(pool: FacePool, rng: np.random.Generator) -> int:
    if len(pool) == 0:
        raise ValueError(f"{pool.video_id}: cannot sample from an empty pool")
    return int(rng.integers(0, len(pool)))


def sample_random_reference(pool: FacePool, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the pool; the training-time identity condition."""
    return pool.crops[sample_reference_index(pool, rng)]


def save_pool(pool: FacePool, pool_dir) -> None:
    pool_dir = Path(pool_dir)
    pool_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (crop, frame_idx) in enumerate(zip(pool.crops, pool.source_frames)):
        name = f"crop_{i:03d}.png"
        Image.fromarray((crop * 255.0 + 0.5).astype(np.uint8)).save(pool_dir / name)
        box = pool.boxes[i] if i < len(pool.boxes) else None
        entries.append({
            "file": name,
            "source_frame": int(frame_idx),
            "box": [box.x0, box.y0, box.x1, box.y1] if box else None,
            "confidence": box.confidence if box else None,
            "n_faces_in_frame": 1,
        })
    meta = {
        "video_id": pool.video_id,
        "ref_size": pool.ref_size,
        "crops": entries,
        "attempts": [[int(f), int(n)] for f, n in pool.attempts],
    }
    (pool_dir / "pool.json").write_text(json.dumps(meta, indent=1))


def load_pool(pool_dir) -> FacePool:
    pool_dir = Path(pool_dir)
    meta = json.loads((pool_dir / "pool.json").read_text())
    crops, frames, boxes = [], [], []
    for entry in meta["crops"]:
        arr = np.asarray(Image.open(pool_dir / entry["file"]), dtype=np.float32) / 255.0
        crops.append(arr)
        frames.append(int(entry["source_frame"]))
        if entry.get("box"):
            x0, y0, x1, y1 = entry["box"]
            boxes.append(FaceBox(int(entry["source_frame"]), x0, y0, x1, y1,
                                 float(entry.get("confidence") or 0.0)))
    return FacePool(video_id=meta["video_id"], crops=crops, source_frames=frames,
                    boxes=boxes, ref_size=int(meta["ref_size"]),
                    attempts=[(int(f), int(n)) for f, n in meta.get("attempts", [])])
