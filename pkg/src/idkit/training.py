"""Random-reference adapter training.

Each batch pairs a clip's latent with a face crop drawn uniformly from that
video's pool, so the identity condition is only weakly correlated with the
reconstruction target: over many steps the content of individual reference
crops averages out and only the identity signal survives. Text conditioning
drops to the null embedding with a configured probability (classifier-free
guidance training). Only adapter parameters receive gradients; the backbone
stays frozen and its checksum is expected to survive any number of steps.

All stochastic choices at global step k are drawn from substreams keyed by
(seed, purpose, k), so a resumed run replays an uninterrupted run exactly.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .adapter import FaceAdapter, encode_face, init_adapter
from .backbone import ConditionBundle, TextEmbedder, TinyVideoBackbone, BackboneSpec, noise_predictor
from .checkpoint import load_adapter, read_archive, save_adapter, write_archive
from .data.faces import FacePool, load_pool, sample_reference_index
from .data.manifest import DatasetRecord, read_manifest
from .diffusion import NoiseSchedule, TrainSample, encode_frames, training_loss
from .errors import ConfigurationError, NonFiniteLossError
from .features import StubFeatureExtractor, extract_image_features
from .rng import normal32, substream

__all__ = ["TrainConfig", "TrainStepRecord", "TrainResult", "make_batch", "train_step", "train_loop"]

log = logging.getLogger(__name__)

# Timestep strata per cover cycle; 40 keeps any 20-step, batch-2 window
# perfectly balanced over the schedule.
T_STRATA = 40


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 2
    null_text_prob: float = 0.2
    steps: int = 200
    seed: int = 0
    checkpoint_every: int = 50
    lambda_train: float = 1.0
    face_dropout_prob: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.null_text_prob <= 1.0:
            raise ValueError(f"null_text_prob must lie in [0, 1], got {self.null_text_prob}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.steps < 0 or self.checkpoint_every < 1:
            raise ValueError("batch_size >= 1, steps >= 0, checkpoint_every >= 1 required")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        return cls(**{k: d[k] for k in d if k in cls.__dataclass_fields__})

    @classmethod
    def from_json_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainStepRecord:
    step: int
    loss: float
    ref_crop_ids: list[str]
    null_text: list[bool]
    grad_norm: float
    wall_time: float

    def to_dict(self) -> dict:
        return asdict(self)


@lru_cache(maxsize=128)
def _cached_clip(path: str) -> np.ndarray:
    return np.load(path)


def make_batch(records: Sequence[DatasetRecord], pools: dict[str, FacePool],
               adapter: FaceAdapter, extractor, embedder: TextEmbedder,
               spec: BackboneSpec, sched: NoiseSchedule, config: TrainConfig,
               step: int, data_root) -> list[TrainSample]:
    """Assemble one batch for global step `step`; fully determined by
    (config.seed, step) plus the current adapter weights."""
    rng = substream(config.seed, "batch", step)
    root = Path(data_root)
    batch: list[TrainSample] = []
    guard = 0
    while len(batch) < config.batch_size:
        guard += 1
        if guard > 20 * config.batch_size:
            raise ConfigurationError("could not assemble a batch; too many unusable records")
        # Records cycle through seeded per-epoch shuffles; timesteps follow a
        # jittered stratified cover of [0, n_steps) (empirically uniform, but
        # balanced enough that short windowed loss means track the trend
        # instead of the batch composition). Both depend only on (seed, step),
        # never on loop state, so resumed runs replay exactly.
        pos = (step - 1) * config.batch_size + len(batch)
        epoch, offset = divmod(pos, len(records))
        order = substream(config.seed, "order", epoch).permutation(len(records))
        rec = records[int(order[offset])]
        if rec.video_id not in pools or len(pools[rec.video_id]) == 0 or not rec.unified_caption:
            log.warning("skipping unusable record %s (empty pool or caption); "
                        "should have been filtered upstream", rec.video_id)
            rec = records[int(rng.integers(0, len(records)))]
            if rec.video_id not in pools or len(pools[rec.video_id]) == 0 or not rec.unified_caption:
                continue
        pool = pools[rec.video_id]
        t = int(((pos % T_STRATA) + rng.random()) * sched.n_steps / T_STRATA)
        crop_idx = sample_reference_index(pool, rng)
        use_null = bool(rng.random() < config.null_text_prob)
        drop_face = bool(config.face_dropout_prob > 0 and rng.random() < config.face_dropout_prob)

        clip = _cached_clip(str(root / rec.clip_path))
        z = encode_frames(clip, spec)
        eps = torch.from_numpy(normal32(rng, tuple(z.shape)))
        crop = pool.crops[crop_idx]
        if drop_face:
            tokens = adapter.null_tokens()
        else:
            features = extract_image_features(crop, extractor,
                                              source_id=f"{rec.video_id}/crop{crop_idx:03d}")
            tokens = encode_face(features, adapter)
        text = embedder.null_embedding() if use_null else embedder.embed(rec.unified_caption)
        cond = ConditionBundle(text_embedding=text, face_tokens=tokens, null_text=use_null)
        batch.append(TrainSample(z=z, t=t, eps=eps, cond=cond, record_id=rec.video_id,
                                 ref_crop_id=f"{rec.video_id}/{crop_idx}"))
    return batch


def _adapter_grad_norm(adapter: FaceAdapter) -> float:
    total = 0.0
    for p in adapter.parameters():
        if p.grad is not None:
            total += float((p.grad.detach() ** 2).sum())
    return math.sqrt(total)


def train_step(batch: Sequence[TrainSample], backbone: TinyVideoBackbone,
               adapter: FaceAdapter, optimizer: torch.optim.Optimizer,
               sched: NoiseSchedule, config: TrainConfig, step: int) -> TrainStepRecord:
    """One optimizer step on the adapter. Raises NonFiniteLossError (weights
    untouched) when the loss degenerates."""
    t0 = time.monotonic()
    predictor = noise_predictor(backbone, adapter, config.lambda_train)
    loss = training_loss(batch, predictor, sched)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(
            f"step {step}: loss={float(loss)} on records "
            f"{[s.record_id for s in batch]} (t={[s.t for s in batch]})"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    grad_norm = _adapter_grad_norm(adapter)
    optimizer.step()
    return TrainStepRecord(
        step=step,
        loss=float(loss.detach()),
        ref_crop_ids=[s.ref_crop_id for s in batch],
        null_text=[s.cond.null_text for s in batch],
        grad_norm=grad_norm,
        wall_time=time.monotonic() - t0,
    )


def _save_optimizer(optimizer: torch.optim.Optimizer, names: list[str], step: int,
                    spec: BackboneSpec, path) -> None:
    sd = optimizer.state_dict()
    tensors: dict[str, np.ndarray] = {}
    steps: dict[str, float] = {}
    for idx, state in sd["state"].items():
        name = names[int(idx)]
        tensors[f"{name}.exp_avg"] = state["exp_avg"].detach().cpu().numpy()
        tensors[f"{name}.exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy()
        steps[name] = float(state["step"])
    header = {
        "kind": "optimizer",
        "backbone_spec_hash": spec.spec_hash(),
        "step": step,
        "adam_steps": steps,
        "param_names": names,
    }
    write_archive(path, header, tensors)


def _load_optimizer(optimizer: torch.optim.Optimizer, names: list[str], path) -> int:
    header, tensors = read_archive(path)
    if header.get("kind") != "optimizer":
        raise ConfigurationError(f"{path} is not an optimizer checkpoint")
    state: dict[int, dict] = {}
    for name, adam_step in header["adam_steps"].items():
        idx = names.index(name)
        state[idx] = {
            "step": torch.tensor(float(adam_step)),
            "exp_avg": torch.from_numpy(tensors[f"{name}.exp_avg"]),
            "exp_avg_sq": torch.from_numpy(tensors[f"{name}.exp_avg_sq"]),
        }
    sd = optimizer.state_dict()
    sd["state"] = state
    optimizer.load_state_dict(sd)
    return int(header["step"])


@dataclass
class TrainResult:
    out_dir: Path
    final_checkpoint: Path
    metrics_path: Path
    steps_run: int
    records: list[TrainStepRecord] = field(default_factory=list)


def _truncate_metrics(path: Path, keep_upto: int) -> None:
    if not path.exists():
        return
    lines = [ln for ln in path.read_text().splitlines()
             if ln.strip() and json.loads(ln).get("step", 0) <= keep_upto]
    path.write_text("".join(ln + "\n" for ln in lines))


def train_loop(manifest_path, config: TrainConfig, out_dir, spec: BackboneSpec, *,
               data_root=None, resume_from=None, adapter_kwargs: dict | None = None,
               extractor=None) -> TrainResult:
    """Run (or resume) adapter training against a captioned manifest.

    Writes checkpoints under out_dir/checkpoints (adapter archive plus an
    optimizer sidecar) every checkpoint_every steps and at the end; streams
    one TrainStepRecord JSONL line per step to out_dir/metrics.jsonl.
    """
    manifest_path = Path(manifest_path)
    out_dir = Path(out_dir)
    root = Path(data_root) if data_root is not None else manifest_path.parent
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"

    records = [r for r in read_manifest(manifest_path, data_root=root) if r.unified_caption]
    if not records:
        raise ConfigurationError("no captioned records in the manifest; run captioning first")
    pools = {r.video_id: load_pool(root / r.face_pool_path) for r in records}
    pools = {vid: p for vid, p in pools.items() if len(p) > 0}

    backbone = TinyVideoBackbone(spec)
    sched = NoiseSchedule.linear(spec.n_steps)
    embedder = TextEmbedder(spec)
    adapter_kwargs = dict(adapter_kwargs or {})
    adapter_kwargs.setdefault("seed", config.seed)

    if resume_from is not None:
        adapter, _ = load_adapter(resume_from, expected_spec=spec)
    else:
        adapter = init_adapter(spec, **adapter_kwargs)
    if extractor is None:
        extractor = StubFeatureExtractor(d_feat=adapter.config.d_image)

    names = [n for n, _ in adapter.named_parameters()]
    params = [p for _, p in adapter.named_parameters()]
    optimizer = torch.optim.Adam(params, lr=config.lr, betas=(0.9, 0.999), eps=1e-8)

    start_step = 0
    if resume_from is not None:
        sidecar = Path(str(resume_from) + ".opt")
        if sidecar.exists():
            start_step = _load_optimizer(optimizer, names, sidecar)
        _truncate_metrics(metrics_path, start_step)
    else:
        metrics_path.write_text("")

    def save(step: int) -> Path:
        path = ckpt_dir / f"step_{step:06d}.ckpt"
        save_adapter(adapter, spec, path)
        _save_optimizer(optimizer, names, step, spec, Path(str(path) + ".opt"))
        return path

    last_ckpt = save(start_step)
    out_records: list[TrainStepRecord] = []
    consecutive_bad = 0
    with metrics_path.open("a", encoding="utf-8") as fh:
        for step in range(start_step + 1, config.steps + 1):
            batch = make_batch(records, pools, adapter, extractor, embedder, spec, sched,
                               config, step, root)
            try:
                rec = train_step(batch, backbone, adapter, optimizer, sched, config, step)
            except NonFiniteLossError as exc:
                consecutive_bad += 1
                log.error("aborted step %d: %s", step, exc)
                fh.write(json.dumps({"step": step, "non_finite": True, "error": str(exc)}) + "\n")
                fh.flush()
                if consecutive_bad >= 2:
                    log.error("repeated non-finite losses; reloading %s", last_ckpt)
                    adapter_reload, _ = load_adapter(last_ckpt, expected_spec=spec)
                    with torch.no_grad():
                        for p, q in zip(adapter.parameters(), adapter_reload.parameters()):
                            p.copy_(q)
                    _load_optimizer(optimizer, names, Path(str(last_ckpt) + ".opt"))
                if consecutive_bad >= 4:
                    raise
                continue
            consecutive_bad = 0
            out_records.append(rec)
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
            fh.flush()
            if step % config.checkpoint_every == 0 or step == config.steps:
                last_ckpt = save(step)

    return TrainResult(out_dir=out_dir, final_checkpoint=last_ckpt,
                       metrics_path=metrics_path, steps_run=max(config.steps - start_step, 0),
                       records=out_records)
