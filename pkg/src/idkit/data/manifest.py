"""Training manifest: one JSONL record per usable video, plus the dataset
build step that produces it from a raw corpus."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..errors import EmptyPoolError, ManifestError, SkipRecordError
from ..rng import substream
from .clips import clip_and_resize, save_clip
from .corpus import load_corpus_video, load_ground_truth
from .faces import FacePool, build_face_pool, save_pool

__all__ = ["DatasetRecord", "FilterReport", "write_manifest", "read_manifest",
           "filter_multi_face_videos", "build_dataset"]

_FIELDS = ("video_id", "clip_path", "unified_caption", "face_pool_path", "n_pool")


@dataclass
class DatasetRecord:
    """One manifest line. Paths are relative to the dataset root."""

    video_id: str
    clip_path: str
    unified_caption: str
    face_pool_path: str
    n_pool: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FilterReport:
    kept: list[str] = field(default_factory=list)
    dropped: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kept": len(self.kept),
            "dropped": len(self.dropped),
            "kept_ids": sorted(self.kept),
            "reasons": dict(sorted(self.dropped.items())),
        }


def write_manifest(records: Sequence[DatasetRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def read_manifest(path, data_root=None, validate: bool = True) -> list[DatasetRecord]:
    """Parse and (by default) validate a manifest. Errors name the line."""
    path = Path(path)
    root = Path(data_root) if data_root is not None else path.parent
    records: list[DatasetRecord] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"invalid JSON: {exc.msg}", line_number=lineno) from exc
        missing = [k for k in _FIELDS if k not in raw]
        if missing:
            raise ManifestError(f"missing fields {missing}", line_number=lineno)
        rec = DatasetRecord(**{k: raw[k] for k in _FIELDS})
        if validate:
            clip = root / rec.clip_path
            pool_dir = root / rec.face_pool_path
            if not clip.exists():
                raise ManifestError(f"clip file {clip} does not exist", line_number=lineno)
            if not (pool_dir / "pool.json").exists():
                raise ManifestError(f"face pool {pool_dir} does not exist", line_number=lineno)
            n = len(json.loads((pool_dir / "pool.json").read_text())["crops"])
            if n != rec.n_pool:
                raise ManifestError(f"n_pool {rec.n_pool} != {n} crops on disk", line_number=lineno)
        records.append(rec)
    return records


def _multi_face_majority(attempts: Sequence[tuple[int, int]]) -> bool:
    if not attempts:
        return False
    multi = sum(1 for _, n in attempts if n >= 2)
    return multi > len(attempts) / 2


def filter_multi_face_videos(records: Sequence[DatasetRecord],
                             evidence: Mapping[str, Sequence[tuple[int, int]]],
                             ) -> tuple[list[DatasetRecord], FilterReport]:
    """Drop videos whose pool-construction attempts were mostly multi-face.
    Reuses the recorded detection evidence; no second detector pass."""
    report = FilterReport()
    kept: list[DatasetRecord] = []
    for rec in records:
        if _multi_face_majority(evidence.get(rec.video_id, [])):
            report.dropped[rec.video_id] = "multi_face"
        else:
            kept.append(rec)
            report.kept.append(rec.video_id)
    return kept, report


def build_dataset(corpus_dir, out_dir, *, clip_length: int = 16, size: int = 512,
                  pool_target: int = 5, ref_size: int = 224, seed: int = 0,
                  detector=None, manifest_name: str = "manifest.jsonl",
                  ) -> tuple[list[DatasetRecord], FilterReport]:
    """Corpus directory -> clips, face pools, manifest, and a filter report.

    Captions start empty; the captioning stage fills them in. Videos that
    are too short, have no usable face, or are majority multi-face are
    dropped and show up in the report, never in the manifest.
    """
    corpus_dir = Path(corpus_dir)
    out_dir = Path(out_dir)
    gt = load_ground_truth(corpus_dir) if (corpus_dir / "ground_truth.json").exists() else None
    video_ids = sorted(p.name for p in (corpus_dir / "videos").iterdir() if p.is_dir()) \
        if (corpus_dir / "videos").is_dir() else []

    candidates: list[tuple[DatasetRecord, FacePool]] = []
    evidence: dict[str, list[tuple[int, int]]] = {}
    report = FilterReport()
    for i, video_id in enumerate(video_ids):
        video = load_corpus_video(corpus_dir, video_id)
        try:
            clip = clip_and_resize(video, clip_length=clip_length, size=size,
                                   rng=substream(seed, "clip_offset", i))
        except SkipRecordError:
            report.dropped[video_id] = "too_short"
            continue
        try:
            pool = build_face_pool(video, substream(seed, "pool", i), pool_target=pool_target,
                                   detector=detector, ref_size=ref_size)
        except EmptyPoolError as exc:
            attempts = getattr(exc, "attempts", [])
            report.dropped[video_id] = "multi_face" if _multi_face_majority(attempts) else "no_single_face"
            continue
        evidence[video_id] = pool.attempts
        rec = DatasetRecord(
            video_id=video_id,
            clip_path=f"clips/{video_id}.npy",
            unified_caption="",
            face_pool_path=f"pools/{video_id}",
            n_pool=len(pool),
        )
        candidates.append((rec, pool))
        # Clip is written now; pool only if the video survives filtering.
        save_clip(clip, out_dir / rec.clip_path)

    kept, filt = filter_multi_face_videos([r for r, _ in candidates], evidence)
    report.kept = filt.kept
    report.dropped.update(filt.dropped)
    kept_ids = set(filt.kept)
    records = []
    for rec, pool in candidates:
        if rec.video_id not in kept_ids:
            (out_dir / rec.clip_path).unlink(missing_ok=True)
            continue
        save_pool(pool, out_dir / rec.face_pool_path)
        records.append(rec)
    write_manifest(records, out_dir / manifest_name)
    (out_dir / "filter_report.json").write_text(json.dumps(report.to_dict(), indent=1))
    if gt is not None:
        # Convenience copy so downstream checks can reach ground truth
        # without tracking the corpus directory separately.
        (out_dir / "ground_truth.json").write_text(json.dumps(gt, sort_keys=True, indent=1))
    return records, report
