"""Versioned checkpoint archives.

A checkpoint is a ZIP holding `header.json` plus one raw little-endian
float32 blob per named tensor. The header pins the format version and the
hash of the backbone spec the weights were built against; loading against a
different spec fails loudly rather than producing silently mismatched
weights. Entries are written stored (uncompressed) with a fixed timestamp,
so identical weights produce byte-identical files.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .adapter import AdapterConfig, FaceAdapter
from .backbone import BackboneSpec
from .errors import (
    CheckpointError,
    CheckpointHashError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)

__all__ = ["FORMAT_VERSION", "write_archive", "read_archive", "save_adapter", "load_adapter"]

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)  # fixed zip timestamp for reproducible bytes


def write_archive(path, header: dict, tensors: Mapping[str, np.ndarray]) -> None:
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header["tensors"] = {name: list(np.asarray(t).shape) for name, t in sorted(tensors.items())}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("header.json", date_time=_EPOCH),
                    json.dumps(header, sort_keys=True, indent=1))
        for name in sorted(tensors):
            data = np.ascontiguousarray(tensors[name], dtype="<f4")
            zf.writestr(zipfile.ZipInfo(f"tensors/{name}.f32", date_time=_EPOCH), data.tobytes())
    path.write_bytes(buf.getvalue())


def read_archive(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            try:
                header = json.loads(zf.read("header.json"))
            except KeyError:
                raise CheckpointTruncatedError(f"{path}: no header.json") from None
            version = header.get("format_version")
            if version != FORMAT_VERSION:
                raise CheckpointVersionError(
                    f"{path}: format_version {version} != supported {FORMAT_VERSION}"
                )
            tensors: dict[str, np.ndarray] = {}
            for name, shape in header.get("tensors", {}).items():
                try:
                    raw = zf.read(f"tensors/{name}.f32")
                except KeyError:
                    raise CheckpointTruncatedError(f"{path}: missing tensor {name}") from None
                expect = int(np.prod(shape)) * 4
                if len(raw) != expect:
                    raise CheckpointTruncatedError(
                        f"{path}: tensor {name} has {len(raw)} bytes, expected {expect}"
                    )
                tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    except zipfile.BadZipFile as exc:
        raise CheckpointTruncatedError(f"{path}: not a readable archive ({exc})") from exc
    return header, tensors


def save_adapter(adapter: FaceAdapter, spec: BackboneSpec, path) -> None:
    c = adapter.config
    header = {
        "kind": "adapter",
        "backbone_spec_hash": spec.spec_hash(),
        "backbone_spec": spec.to_dict(),
        "n_queries": c.n_queries,
        "d_ctx": c.d_ctx,
        "lambda_default": c.lambda_default,
        "seed": c.seed,
        "adapter_config": c.to_dict(),
    }
    tensors = {name: p.detach().cpu().numpy() for name, p in adapter.state_dict().items()}
    write_archive(path, header, tensors)


def load_adapter(path, expected_spec: BackboneSpec | None = None) -> tuple[FaceAdapter, BackboneSpec]:
    """Rebuild an adapter (and the spec it was trained against) from disk."""
    header, tensors = read_archive(path)
    if header.get("kind") != "adapter":
        raise CheckpointError(f"{path}: kind {header.get('kind')!r} is not an adapter checkpoint")
    spec = BackboneSpec.from_dict(header["backbone_spec"])
    stored_hash = header["backbone_spec_hash"]
    if spec.spec_hash() != stored_hash:
        raise CheckpointHashError(
            f"{path}: embedded spec hashes to {spec.spec_hash()} but header claims {stored_hash}"
        )
    if expected_spec is not None and expected_spec.spec_hash() != stored_hash:
        raise CheckpointHashError(
            f"{path}: checkpoint built against spec {stored_hash}, "
            f"caller expects {expected_spec.spec_hash()}"
        )
    config = AdapterConfig.from_dict(header["adapter_config"])
    adapter = FaceAdapter(config, spec.cross_attention_widths())
    state = {name: torch.from_numpy(arr) for name, arr in tensors.items()}
    missing = set(adapter.state_dict()) - set(state)
    if missing:
        raise CheckpointTruncatedError(f"{path}: tensors missing for {sorted(missing)}")
    adapter.load_state_dict(state)
    return adapter, spec
