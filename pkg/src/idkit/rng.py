"""Deterministic random streams.

All randomness in the toolkit flows from one integer seed, split into
purpose-tagged substreams. A substream is addressed by (seed, purpose,
*indices) and is stateless: asking for the same address twice yields the
same generator, so a training run resumed at step k replays exactly the
draws an uninterrupted run would have made at step k.
"""

from __future__ import annotations

import numpy as np

# Stable purpose -> lane mapping. Append only; never renumber, or old
# checkpoints stop replaying the same streams.
_PURPOSES = {
    "backbone_init": 0,
    "adapter_init": 1,
    "batch": 2,
    "timestep": 3,
    "noise": 4,
    "reference": 5,
    "dropout": 6,
    "sample_init": 7,
    "sample_noise": 8,
    "clip_offset": 9,
    "corpus": 10,
    "pool": 11,
    "order": 12,
}


def substream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Generator for the (seed, purpose, *indices) address."""
    try:
        lane = _PURPOSES[purpose]
    except KeyError:
        raise KeyError(f"unknown rng purpose {purpose!r}; known: {sorted(_PURPOSES)}") from None
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(lane, *[int(i) for i in indices]))
    return np.random.default_rng(ss)


def normal32(rng: np.random.Generator, shape, std: float = 1.0) -> np.ndarray:
    """float32 gaussian draw; float32 is the storage dtype everywhere."""
    return (rng.standard_normal(size=shape) * std).astype(np.float32)
