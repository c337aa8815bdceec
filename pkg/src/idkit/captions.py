"""Caption generation services.

Captions are produced in two decoupled passes - an attribute caption from
the clip's median frame (image captioner) and an action caption from the
whole clip (video captioner) - then merged into one unified caption by a
text model. All three backends sit behind thin client interfaces with
deterministic local mocks, so the corpus-level orchestration (resume,
quarantine, bounded concurrency) is fully testable offline.
"""

from __future__ import annotations

import base64
import io
import json
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CaptionClientError, CaptionContentError
from .data.clips import load_clip
from .data.manifest import DatasetRecord, read_manifest, write_manifest

__all__ = [
    "CaptionTriple",
    "CaptionerEndpoint",
    "CaptionOutcome",
    "median_frame_index",
    "subsample_indices",
    "render_unifier_prompt",
    "parse_unifier_prompt",
    "attribute_caption",
    "action_caption",
    "unify_captions",
    "caption_corpus",
    "load_endpoints",
    "make_client",
    "EchoImageCaptioner",
    "EchoVideoCaptioner",
    "ContentImageCaptioner",
    "ContentVideoCaptioner",
    "JoinUnifier",
    "FlakyClient",
    "UNIFIER_TEMPLATE_V1",
]

UNIFIER_TEMPLATE_V1 = (
    "Merge the following two descriptions of the same video into one fluent caption "
    "that keeps all person attributes and the action. "
    "Attributes: {attribute} Action: {action}"
)
MAX_UNIFIED_TOKENS = 77


@dataclass
class CaptionTriple:
    attribute: str
    action: str
    unified: str
    provenance: dict = field(default_factory=dict)

    @property
    def completed(self) -> bool:
        return bool(self.attribute) and bool(self.action) and bool(self.unified)

    def to_dict(self) -> dict:
        return {"attribute": self.attribute, "action": self.action,
                "unified": self.unified, "provenance": self.provenance}


@dataclass(frozen=True)
class CaptionerEndpoint:
    """Where a remote captioner lives. auth_env names an environment variable
    holding the token; the secret itself is never stored or logged."""

    base_url: str
    model_name: str
    timeout: float = 30.0
    max_retries: int = 2
    auth_env: str | None = None

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError(f"timeout must be > 0, got {self.timeout}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")


@dataclass
class CaptionOutcome:
    text: str
    provenance: dict


def median_frame_index(n_frames: int) -> int:
    if n_frames < 1:
        raise ValueError("clip is empty")
    return n_frames // 2


def subsample_indices(n_frames: int, max_frames: int) -> list[int]:
    """Evenly spaced frame indices, floor(i * n / k)."""
    if n_frames <= max_frames:
        return list(range(n_frames))
    return [i * n_frames // max_frames for i in range(max_frames)]


def _escape_braces(text: str) -> str:
    return text.replace("{", "{{").replace("}", "}}")


def _unescape_braces(text: str) -> str:
    return text.replace("{{", "{").replace("}}", "}")


def render_unifier_prompt(attribute: str, action: str) -> str:
    """Fill the fixed merge template; literal braces in the captions are
    escaped so the rendered prompt parses back losslessly."""
    if not attribute or not action:
        raise ValueError("both captions must be nonempty")
    return UNIFIER_TEMPLATE_V1.format(
        attribute=_escape_braces(attribute), action=_escape_braces(action)
    )


_PROMPT_RE = re.compile(
    "^" + re.escape(UNIFIER_TEMPLATE_V1.split("{attribute}")[0])
    + "(.*?)" + re.escape(" Action: ") + "(.*)$",
    re.DOTALL,
)


def parse_unifier_prompt(prompt: str) -> tuple[str, str]:
    m = _PROMPT_RE.match(prompt)
    if m is None:
        raise ValueError("prompt does not match the unifier template")
    return _unescape_braces(m.group(1)), _unescape_braces(m.group(2))


def _call_with_retries(fn, max_retries: int, what: str):
    failures = 0
    while True:
        try:
            return fn(), failures
        except Exception as exc:
            failures += 1
            if failures > max_retries:
                raise CaptionClientError(f"{what} failed after {failures} attempts: {exc}") from exc


def attribute_caption(clip: np.ndarray, client, max_retries: int = 0) -> CaptionOutcome:
    """Caption the clip's median frame with the image backend."""
    if len(clip) < 1:
        raise ValueError("clip is empty")
    index = median_frame_index(len(clip))
    text, retries = _call_with_retries(
        lambda: client.caption_image(clip[index], {"frame_index": index}),
        max_retries, f"attribute caption via {getattr(client, 'name', '?')}",
    )
    return CaptionOutcome(text=text, provenance={
        "backend": getattr(client, "name", "?"), "frame_index": index,
        "retries": retries, "timestamp": time.time(),
    })


def action_caption(clip: np.ndarray, client, max_retries: int = 0) -> CaptionOutcome:
    """Caption the whole clip (evenly subsampled to the backend's frame
    budget) with the video backend."""
    if len(clip) < 1:
        raise ValueError("clip is empty")
    indices = subsample_indices(len(clip), int(getattr(client, "max_frames", 8)))
    frames = clip[indices]
    text, retries = _call_with_retries(
        lambda: client.caption_video(frames, {"frame_indices": indices}),
        max_retries, f"action caption via {getattr(client, 'name', '?')}",
    )
    return CaptionOutcome(text=text, provenance={
        "backend": getattr(client, "name", "?"), "frame_indices": indices,
        "retries": retries, "timestamp": time.time(),
    })


def unify_captions(attribute: str, action: str, client, max_retries: int = 0) -> CaptionOutcome:
    """Merge the two captions via the text backend."""
    prompt = render_unifier_prompt(attribute, action)
    text, retries = _call_with_retries(
        lambda: client.merge(prompt, {}),
        max_retries, f"caption merge via {getattr(client, 'name', '?')}",
    )
    if not text or not text.strip():
        raise CaptionContentError(f"unifier {getattr(client, 'name', '?')} returned empty text")
    tokens = text.split()
    if len(tokens) > MAX_UNIFIED_TOKENS:
        text = " ".join(tokens[:MAX_UNIFIED_TOKENS])
    return CaptionOutcome(text=text, provenance={
        "backend": getattr(client, "name", "?"), "retries": retries, "timestamp": time.time(),
    })


# ---------------------------------------------------------------------------
# Clients


class _MockStats:
    """Thread-safe call counting plus an in-flight gauge for concurrency tests."""

    def __init__(self, delay: float = 0.0):
        self.delay = delay
        self.calls = 0
        self.in_flight = 0
        self.max_in_flight = 0
        self._lock = threading.Lock()

    def _enter(self):
        with self._lock:
            self.calls += 1
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)

    def _exit(self):
        with self._lock:
            self.in_flight -= 1

    def _track(self, fn):
        self._enter()
        try:
            if self.delay:
                time.sleep(self.delay)
            return fn()
        finally:
            self._exit()


class EchoImageCaptioner(_MockStats):
    """Replies with the submitted frame index; protocol checks only."""

    name = "mock-echo-image"

    def caption_image(self, image, meta) -> str:
        return self._track(lambda: f"frame:{meta['frame_index']}")


class EchoVideoCaptioner(_MockStats):
    """Replies with the submitted frame count."""

    name = "mock-echo-video"

    def __init__(self, max_frames: int = 8, delay: float = 0.0):
        super().__init__(delay)
        self.max_frames = max_frames

    def caption_video(self, frames, meta) -> str:
        return self._track(lambda: f"frames:{len(frames)}")


_COLOR_WORDS = ["red", "orange", "yellow", "green", "cyan", "blue", "violet", "white"]


def _color_word(rgb: np.ndarray) -> str:
    r, g, b = [float(c) for c in rgb]
    if min(r, g, b) > 0.75:
        return "white"
    hues = {"red": r - (g + b) / 2, "green": g - (r + b) / 2, "blue": b - (r + g) / 2,
            "yellow": (r + g) / 2 - b, "cyan": (g + b) / 2 - r, "violet": (r + b) / 2 - g}
    return max(hues, key=hues.get)


class ContentImageCaptioner(_MockStats):
    """Deterministic caption from pixel statistics of the bright region."""

    name = "mock-content-image"

    def caption_image(self, image, meta) -> str:
        def describe():
            luma = image @ np.array([0.299, 0.587, 0.114], dtype=image.dtype)
            bright = image[luma > 0.45]
            if len(bright) == 0:
                return "an empty dark scene"
            return f"a person with a {_color_word(bright.mean(axis=0))} face"
        return self._track(describe)


class ContentVideoCaptioner(_MockStats):
    """Deterministic motion summary from centroid drift of bright pixels."""

    name = "mock-content-video"

    def __init__(self, max_frames: int = 8, delay: float = 0.0):
        super().__init__(delay)
        self.max_frames = max_frames

    def caption_video(self, frames, meta) -> str:
        def describe():
            centers = []
            for frame in frames:
                luma = frame @ np.array([0.299, 0.587, 0.114], dtype=frame.dtype)
                ys, xs = np.nonzero(luma > 0.45)
                if len(xs):
                    centers.append((ys.mean(), xs.mean()))
            if len(centers) < 2:
                return "nothing moves"
            dy = centers[-1][0] - centers[0][0]
            dx = centers[-1][1] - centers[0][1]
            if max(abs(dx), abs(dy)) < 1.0:
                return "a person holding still"
            word = ("down" if dy > 0 else "up") if abs(dy) >= abs(dx) else ("right" if dx > 0 else "left")
            return f"a person drifting {word}"
        return self._track(describe)


class JoinUnifier(_MockStats):
    """Parses the rendered prompt and joins the two captions."""

    name = "mock-join-unifier"

    def __init__(self, sep: str = " | ", delay: float = 0.0):
        super().__init__(delay)
        self.sep = sep

    def merge(self, prompt, meta) -> str:
        def join():
            attribute, action = parse_unifier_prompt(prompt)
            return f"{attribute}{self.sep}{action}"
        return self._track(join)


class FlakyClient:
    """Wraps any client; the first `fail_times` calls raise."""

    def __init__(self, inner, fail_times: int):
        self.inner = inner
        self.name = f"flaky({getattr(inner, 'name', '?')})"
        self.fail_times = fail_times
        self.calls = 0
        self._lock = threading.Lock()

    @property
    def max_frames(self):
        return getattr(self.inner, "max_frames", 8)

    def _maybe_fail(self):
        with self._lock:
            self.calls += 1
            if self.calls <= self.fail_times:
                raise ConnectionError(f"synthetic failure {self.calls}/{self.fail_times}")

    def caption_image(self, image, meta):
        self._maybe_fail()
        return self.inner.caption_image(image, meta)

    def caption_video(self, frames, meta):
        self._maybe_fail()
        return self.inner.caption_video(frames, meta)

    def merge(self, prompt, meta):
        self._maybe_fail()
        return self.inner.merge(prompt, meta)


def _b64_png(image: np.ndarray) -> str:
    from PIL import Image
    buf = io.BytesIO()
    Image.fromarray((np.asarray(image) * 255.0 + 0.5).astype(np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class HttpCaptionClient:
    """JSON-over-HTTP transport: POST {model, inputs, params}, expects
    {"caption": ...} back. One class serves all three roles."""

    def __init__(self, endpoint: CaptionerEndpoint, max_frames: int = 8):
        self.endpoint = endpoint
        self.max_frames = max_frames
        self.name = f"http:{endpoint.model_name}"

    def _post(self, inputs: dict, params: dict) -> str:
        import os
        import requests
        headers = {}
        if self.endpoint.auth_env:
            token = os.environ.get(self.endpoint.auth_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        resp = requests.post(
            self.endpoint.base_url,
            json={"model": self.endpoint.model_name, "inputs": inputs, "params": params},
            timeout=self.endpoint.timeout,
            headers=headers,
        )
        resp.raise_for_status()
        return resp.json()["caption"]

    def caption_image(self, image, meta) -> str:
        return self._post({"images": [_b64_png(image)]}, meta)

    def caption_video(self, frames, meta) -> str:
        return self._post({"images": [_b64_png(f) for f in frames]}, meta)

    def merge(self, prompt, meta) -> str:
        return self._post({"prompt": prompt}, meta)


_MOCK_FACTORIES = {
    "mock-echo-image": lambda cfg: EchoImageCaptioner(delay=cfg.get("delay", 0.0)),
    "mock-echo-video": lambda cfg: EchoVideoCaptioner(max_frames=cfg.get("max_frames", 8),
                                                      delay=cfg.get("delay", 0.0)),
    "mock-content-image": lambda cfg: ContentImageCaptioner(delay=cfg.get("delay", 0.0)),
    "mock-content-video": lambda cfg: ContentVideoCaptioner(max_frames=cfg.get("max_frames", 8),
                                                            delay=cfg.get("delay", 0.0)),
    "mock-join-unifier": lambda cfg: JoinUnifier(sep=cfg.get("sep", " | "),
                                                 delay=cfg.get("delay", 0.0)),
}


def make_client(cfg: Mapping):
    """Build a client from one endpoint-config entry."""
    backend = cfg.get("backend", "http")
    if backend in _MOCK_FACTORIES:
        return _MOCK_FACTORIES[backend](dict(cfg))
    if backend == "http":
        endpoint = CaptionerEndpoint(
            base_url=cfg["base_url"], model_name=cfg["model_name"],
            timeout=cfg.get("timeout", 30.0), max_retries=cfg.get("max_retries", 2),
            auth_env=cfg.get("auth_env"),
        )
        return HttpCaptionClient(endpoint, max_frames=cfg.get("max_frames", 8))
    raise ValueError(f"unknown captioner backend {backend!r}")


def load_endpoints(path) -> dict:
    """Endpoint config file -> {"attribute": client, "action": client,
    "unifier": client, "retries": {role: int}}."""
    cfg = json.loads(Path(path).read_text())
    clients = {}
    retries = {}
    for role in ("attribute", "action", "unifier"):
        if role not in cfg:
            raise ValueError(f"endpoints file missing role {role!r}")
        clients[role] = make_client(cfg[role])
        retries[role] = int(cfg[role].get("max_retries", 0))
    clients["retries"] = retries
    return clients


# ---------------------------------------------------------------------------
# Corpus-level orchestration


def _load_caption_state(path: Path) -> dict[str, CaptionTriple]:
    state: dict[str, CaptionTriple] = {}
    if path.exists():
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            triple = CaptionTriple(attribute=d["attribute"], action=d["action"],
                                   unified=d["unified"], provenance=d.get("provenance", {}))
            if triple.completed:
                state[d["video_id"]] = triple
    return state


def caption_corpus(manifest_path, clients: Mapping, *, data_root=None,
                   concurrency_limit: int = 4) -> dict:
    """Caption every record that does not have a completed triple yet.

    Progress checkpoints to captions.jsonl next to the manifest, so reruns
    resume and make no new client calls for finished records. Failures land
    in quarantine.jsonl with their stage and error; the run never aborts on
    a single bad record. Ends by rewriting the manifest with the unified
    captions filled in.
    """
    from concurrent.futures import ThreadPoolExecutor

    manifest_path = Path(manifest_path)
    root = Path(data_root) if data_root is not None else manifest_path.parent
    records = read_manifest(manifest_path, data_root=root)
    captions_path = manifest_path.parent / "captions.jsonl"
    quarantine_path = manifest_path.parent / "quarantine.jsonl"
    retries = clients.get("retries", {})
    state = _load_caption_state(captions_path)
    todo = [rec for rec in records if rec.video_id not in state]
    write_lock = threading.Lock()
    quarantined = 0

    def process(rec: DatasetRecord):
        stage = "load"
        attempts = 0
        try:
            clip = load_clip(root / rec.clip_path)
            stage = "attribute"
            attr = attribute_caption(clip, clients["attribute"], retries.get("attribute", 0))
            attempts += attr.provenance["retries"] + 1
            stage = "action"
            act = action_caption(clip, clients["action"], retries.get("action", 0))
            attempts += act.provenance["retries"] + 1
            stage = "unify"
            uni = unify_captions(attr.text, act.text, clients["unifier"], retries.get("unifier", 0))
            attempts += uni.provenance["retries"] + 1
            triple = CaptionTriple(
                attribute=attr.text, action=act.text, unified=uni.text,
                provenance={
                    "attribute_backend": attr.provenance["backend"],
                    "action_backend": act.provenance["backend"],
                    "unifier_backend": uni.provenance["backend"],
                    "frame_index": attr.provenance["frame_index"],
                    "frame_indices": act.provenance["frame_indices"],
                    "timestamps": {
                        "attribute": attr.provenance["timestamp"],
                        "action": act.provenance["timestamp"],
                        "unified": uni.provenance["timestamp"],
                    },
                },
            )
            return rec.video_id, triple, None, attempts
        except Exception as exc:
            failure = {"video_id": rec.video_id, "stage": stage,
                       "error": str(exc), "attempt_count": attempts + 1}
            return rec.video_id, None, failure, attempts + 1

    client_calls = 0
    with ThreadPoolExecutor(max_workers=max(1, concurrency_limit)) as pool, \
            captions_path.open("a", encoding="utf-8") as cap_fh, \
            quarantine_path.open("a", encoding="utf-8") as q_fh:
        for video_id, triple, failure, attempts in pool.map(process, todo):
            with write_lock:
                client_calls += attempts
                if triple is not None:
                    state[video_id] = triple
                    cap_fh.write(json.dumps({"video_id": video_id, **triple.to_dict()},
                                            sort_keys=True) + "\n")
                    cap_fh.flush()
                else:
                    quarantined += 1
                    q_fh.write(json.dumps(failure, sort_keys=True) + "\n")
                    q_fh.flush()

    for rec in records:
        if rec.video_id in state:
            rec.unified_caption = state[rec.video_id].unified
    write_manifest(records, manifest_path)
    return {
        "records": len(records),
        "already_captioned": len(records) - len(todo),
        "new_captions": len([r for r in todo if r.video_id in state]),
        "quarantined": quarantined,
        "client_calls": client_calls,
        "captions_path": str(captions_path),
        "quarantine_path": str(quarantine_path),
    }
