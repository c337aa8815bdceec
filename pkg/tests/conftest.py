import numpy as np
import pytest

from idkit.backbone import BackboneSpec
from idkit.captions import ContentImageCaptioner, ContentVideoCaptioner, JoinUnifier, caption_corpus
from idkit.data import CorpusSpec, build_dataset, generate_synthetic_corpus, write_corpus


def tiny_spec(**overrides) -> BackboneSpec:
    """Smallest spec that exercises both levels; dims <= 8 so brute-force
    oracles and finite differences stay cheap."""
    base = dict(latent_size=8, frames=2, d_ctx=6, n_text=4, level_widths=(4, 8),
                time_dim=8, n_steps=50)
    base.update(overrides)
    return BackboneSpec(**base)


@pytest.fixture(scope="session")
def ci_spec() -> BackboneSpec:
    return BackboneSpec(latent_size=8, frames=8)


def mock_clients(sep: str = ", ") -> dict:
    return {
        "attribute": ContentImageCaptioner(),
        "action": ContentVideoCaptioner(),
        "unifier": JoinUnifier(sep=sep),
        "retries": {},
    }


@pytest.fixture(scope="session")
def ci_dataset(tmp_path_factory):
    """Full CI-preset dataset: 10-video synthetic corpus (3 multi-face),
    built, filtered, and captioned with the content mocks."""
    root = tmp_path_factory.mktemp("ci_dataset")
    spec = CorpusSpec(n_videos=10, n_multi_face=3, frames=24, height=96, width=96, seed=7)
    videos, ground_truth = generate_synthetic_corpus(spec)
    write_corpus(videos, ground_truth, root / "corpus")
    records, report = build_dataset(root / "corpus", root / "data", clip_length=8, size=64,
                                    pool_target=3, ref_size=32, seed=0)
    caption_corpus(root / "data" / "manifest.jsonl", mock_clients())
    return {
        "root": root,
        "corpus_dir": root / "corpus",
        "data_dir": root / "data",
        "manifest": root / "data" / "manifest.jsonl",
        "ground_truth": ground_truth,
        "records": records,
        "report": report,
        "corpus_spec": spec,
    }


def rand_image(rng: np.random.Generator, h: int = 32, w: int = 32) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=(h, w, 3)).astype(np.float32)
