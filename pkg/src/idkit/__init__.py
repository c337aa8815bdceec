"""idkit: identity-conditioned toy video diffusion.

A trainable face adapter (latent-query identity encoder plus per-site image
key/value projections) injected into a frozen toy video-diffusion backbone
through decoupled cross-attention, trained with random face references
drawn from per-video face pools, over a synthetic corpus built and
captioned by a reproducible pipeline.
"""

__version__ = "0.1.0"

from .adapter import (
    AdapterConfig,
    AttentionContext,
    CrossAttentionWeights,
    FaceAdapter,
    FaceTokens,
    decoupled_cross_attention,
    encode_face,
    init_adapter,
    mix_identities,
)
from .backbone import (
    BackboneSpec,
    ConditionBundle,
    TextEmbedder,
    TinyVideoBackbone,
    backbone_checksum,
    noise_predictor,
    predict_noise,
)
from .checkpoint import load_adapter, save_adapter
from .diffusion import (
    GenerationConfig,
    LatentVideo,
    NoiseSchedule,
    TrainSample,
    cfg_sample,
    decode_latent,
    encode_frames,
    forward_diffuse,
    training_loss,
)
from .features import ImageFeatures, StubFeatureExtractor, extract_image_features
from .training import TrainConfig, TrainStepRecord, make_batch, train_loop, train_step

__all__ = [
    "AdapterConfig", "AttentionContext", "CrossAttentionWeights", "FaceAdapter", "FaceTokens",
    "decoupled_cross_attention", "encode_face", "init_adapter", "mix_identities",
    "BackboneSpec", "ConditionBundle", "TextEmbedder", "TinyVideoBackbone",
    "backbone_checksum", "noise_predictor", "predict_noise",
    "load_adapter", "save_adapter",
    "GenerationConfig", "LatentVideo", "NoiseSchedule", "TrainSample",
    "cfg_sample", "decode_latent", "encode_frames", "forward_diffuse", "training_loss",
    "ImageFeatures", "StubFeatureExtractor", "extract_image_features",
    "TrainConfig", "TrainStepRecord", "make_batch", "train_loop", "train_step",
]
