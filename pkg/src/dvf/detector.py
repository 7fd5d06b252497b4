"""Detection providers feeding the object crop stage.

A provider maps ``(image, prompt, image_id)`` to detections sorted by
descending score. Three implementations: JSON sidecar fixtures, a remote
HTTP service, and a persistent cache wrapping either.

Wire / sidecar body::

    {"boxes": [[x1, y1, x2, y2], ...], "scores": [s1, ...]}
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import tempfile
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

from PIL import Image

from dvf.errors import ProviderError


@dataclass(frozen=True)
class DetectionResult:
    box: tuple[float, float, float, float]
    score: float
    prompt: str = ""

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.box
        return (x2 - x1) * (y2 - y1)


class DetectionProvider(Protocol):
    name: str

    def detect(self, image: Image.Image | None, prompt: str, image_id: str | None = None) -> list[DetectionResult]:
        ...


def rank_detections(dets: Sequence[DetectionResult]) -> list[DetectionResult]:
    """Descending score; ties prefer the larger box, then the lower x1."""
    return sorted(dets, key=lambda d: (-d.score, -d.area, d.box[0]))


def parse_payload(payload, prompt: str, source: str) -> list[DetectionResult]:
    try:
        boxes, scores = payload["boxes"], payload["scores"]
    except (TypeError, KeyError) as exc:
        raise ProviderError(f"{source}: schema mismatch, expected 'boxes' and 'scores'", cause=exc) from exc
    if not isinstance(boxes, list) or not isinstance(scores, list) or len(boxes) != len(scores):
        raise ProviderError(f"{source}: schema mismatch, 'boxes' and 'scores' must be lists of equal length")
    out = []
    for box, score in zip(boxes, scores):
        if not isinstance(box, (list, tuple)) or len(box) != 4:
            raise ProviderError(f"{source}: schema mismatch, box {box!r} is not [x1, y1, x2, y2]")
        try:
            x1, y1, x2, y2 = (float(v) for v in box)
            score = float(score)
        except (TypeError, ValueError) as exc:
            raise ProviderError(f"{source}: schema mismatch, non-numeric box or score", cause=exc) from exc
        if not 0.0 <= score <= 1.0:
            raise ProviderError(f"{source}: schema mismatch, score {score} outside [0, 1]")
        if not (x1 < x2 and y1 < y2):
            raise ProviderError(f"{source}: schema mismatch, box {box!r} has non-positive extent")
        out.append(DetectionResult((x1, y1, x2, y2), score, prompt))
    return rank_detections(out)


def to_payload(dets: Sequence[DetectionResult]) -> dict:
    return {"boxes": [list(d.box) for d in dets], "scores": [d.score for d in dets]}


class FixtureProvider:
    """Replays ``<sidecar_root>/<image_id>.json`` files; a missing sidecar means no detection."""

    def __init__(self, sidecar_root: str | Path):
        self.sidecar_root = Path(sidecar_root)
        self.name = "fixture"

    def sidecar_path(self, image_id: str) -> Path:
        return self.sidecar_root / f"{image_id}.json"

    def detect(self, image, prompt: str, image_id: str | None = None) -> list[DetectionResult]:
        if image_id is None:
            raise ProviderError("fixture provider needs an image id")
        path = self.sidecar_path(image_id)
        if not path.is_file():
            return []
        try:
            payload = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ProviderError(f"malformed sidecar {path}: {exc}", cause=exc) from exc
        return parse_payload(payload, prompt, str(path))


def fixture_provider(sidecar_root: str | Path) -> FixtureProvider:
    return FixtureProvider(sidecar_root)


def encode_png_b64(image: Image.Image) -> str:
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class HttpProvider:
    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.endpoint = endpoint
        self.timeout = timeout
        self.name = f"http:{endpoint}"

    def detect(self, image: Image.Image, prompt: str, image_id: str | None = None) -> list[DetectionResult]:
        body = json.dumps({"prompt": prompt, "image_b64": encode_png_b64(image)}).encode()
        req = urllib.request.Request(
            self.endpoint, data=body, method="POST", headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                raw = resp.read()
        except urllib.error.HTTPError as exc:
            raise ProviderError(f"{self.endpoint} answered {exc.code}", status=exc.code, cause=exc) from exc
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise ProviderError(f"{self.endpoint} unreachable: {exc}", cause=exc) from exc
        try:
            payload = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ProviderError(f"{self.endpoint}: schema mismatch, body is not JSON", cause=exc) from exc
        return parse_payload(payload, prompt, self.endpoint)


def http_provider(endpoint: str, timeout: float = 30.0) -> HttpProvider:
    return HttpProvider(endpoint, timeout)


class CachedProvider:
    """Memoizes a provider on disk, one JSON file per (provider, image id, prompt)."""

    def __init__(self, inner: DetectionProvider, cache_dir: str | Path):
        self.inner = inner
        self.cache_dir = Path(cache_dir)
        self.name = inner.name
        try:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            with tempfile.NamedTemporaryFile(dir=self.cache_dir):
                pass
        except OSError as exc:
            raise ProviderError(f"cache dir {self.cache_dir} is not writable: {exc}", cause=exc) from exc

    def key_path(self, image_id: str, prompt: str) -> Path:
        digest = hashlib.sha256(json.dumps([self.name, image_id, prompt]).encode()).hexdigest()
        return self.cache_dir / digest[:2] / digest[2:4] / f"{digest}.json"

    def detect(self, image, prompt: str, image_id: str | None = None) -> list[DetectionResult]:
        if image_id is None:
            raise ProviderError("cached provider needs an image id to form its key")
        path = self.key_path(image_id, prompt)
        if path.is_file():
            try:
                entry = json.loads(path.read_text())
                return parse_payload(entry["result"], prompt, str(path))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ProviderError(f"corrupt cache entry {path}", cause=exc) from exc
        dets = self.inner.detect(image, prompt, image_id)
        entry = {"provider": self.name, "image_id": image_id, "prompt": prompt, "result": to_payload(dets)}
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            json.dump(entry, fh, indent=1)
        os.replace(tmp, path)
        return dets


def cached(provider: DetectionProvider, cache_dir: str | Path) -> CachedProvider:
    return CachedProvider(provider, cache_dir)
