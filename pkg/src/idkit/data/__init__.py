from .clips import clip_and_resize, load_clip, save_clip
from .corpus import CorpusSpec, RawVideo, generate_synthetic_corpus, load_corpus_video, load_ground_truth, render_video, write_corpus
from .faces import (
    FaceBox,
    FacePool,
    SyntheticDiskDetector,
    build_face_pool,
    crop_face,
    detect_faces,
    load_pool,
    sample_random_reference,
    sample_reference_index,
    save_pool,
)
from .manifest import DatasetRecord, FilterReport, build_dataset, filter_multi_face_videos, read_manifest, write_manifest

__all__ = [
    "CorpusSpec", "RawVideo", "generate_synthetic_corpus", "render_video", "write_corpus",
    "load_corpus_video", "load_ground_truth",
    "FaceBox", "FacePool", "SyntheticDiskDetector", "detect_faces", "crop_face",
    "build_face_pool", "sample_random_reference", "sample_reference_index", "save_pool", "load_pool",
    "clip_and_resize", "save_clip", "load_clip",
    "DatasetRecord", "FilterReport", "write_manifest", "read_manifest",
    "filter_multi_face_videos", "build_dataset",
]
