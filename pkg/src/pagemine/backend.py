"""Backends for the two foundation models behind a thin JSON wire protocol.

``RemoteBackend`` speaks HTTP to a model server:

* ``POST /v1/detect``  ``{"image": b64 PNG, "caption": str, "box_threshold": n, "text_threshold": n}``
  -> ``{"detections": [{"box": [x0,y0,x1,y1], "score": n, "phrase": str}]}``
* ``POST /v1/segment`` ``{"image": b64 PNG, "boxes": [[x0,y0,x1,y1], ...]}``
  -> ``{"masks": [{"size": [h,w], "counts": [int, ...]}, ...]}``
* ``GET /v1/health``   -> ``{"status": "ok", "detector": str, "segmenter": str}``

``FixtureBackend`` replays recorded responses from disk and is the
deterministic stand-in used throughout the test suite.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence, Union

import jsonschema
import requests
from PIL import Image

from .core import PREPROCESSED, BBox, CoordSpace, MaskRLE
from .errors import (
    BackendError,
    FixtureNotFoundError,
    MalformedRLEError,
    ProtocolError,
)

log = logging.getLogger(__name__)

_EXCERPT_LEN = 200
# waits before each retry of a transport failure; protocol errors never retry
RETRY_DELAYS = (0.5, 1.0, 2.0)


def _load_wire_schema(name: str) -> dict:
    ref = resources.files("pagemine").joinpath(f"schemas/wire/{name}.schema.json")
    return json.loads(ref.read_text())


_SCHEMAS: dict[str, dict] = {}


def wire_schema(name: str) -> dict:
    if name not in _SCHEMAS:
        _SCHEMAS[name] = _load_wire_schema(name)
    return _SCHEMAS[name]


def _excerpt(payload) -> str:
    text = payload if isinstance(payload, str) else json.dumps(payload)
    return text[:_EXCERPT_LEN]


def _png_size(png_bytes: bytes) -> tuple[int, int]:
    with Image.open(io.BytesIO(png_bytes)) as im:
        return im.width, im.height


@dataclass(frozen=True)
class DetectRequest:
    """One page image plus the caption and thresholds for a detector call."""

    page_id: str
    image_png: bytes
    caption: str
    box_threshold: float
    text_threshold: float
    size: int

    def __post_init__(self):
        for name, t in (("box_threshold", self.box_threshold), ("text_threshold", self.text_threshold)):
            if not (0.0 < t < 1.0):
                raise ValueError(f"{name} must be in (0, 1), got {t}")
        w, h = _png_size(self.image_png)
        if (w, h) != (self.size, self.size):
            raise ValueError(f"image must be {self.size}x{self.size}, got {w}x{h}")


@dataclass(frozen=True)
class RawDetection:
    """A detector hit in preprocessed coordinates, before any pipeline filtering."""

    box: BBox
    score: float
    phrase: str

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class SegmentRequest:
    """One page image plus the boxes to segment, in preprocessed coordinates."""

    page_id: str
    image_png: bytes
    boxes: tuple[BBox, ...]

    def __post_init__(self):
        if not self.boxes:
            raise ValueError("segment request needs at least one box")


@dataclass(frozen=True)
class BackendDescriptor:
    """Serializable pointer to a backend, snapshotted into run manifests."""

    kind: str
    endpoint: Optional[str] = None
    fixture_root: Optional[str] = None
    timeout: float = 30.0
    max_in_flight: int = 4

    def __post_init__(self):
        if self.kind not in ("remote", "fixture"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "remote" and not self.endpoint:
            raise ValueError("remote backend requires an endpoint")
        if self.kind == "fixture" and not self.fixture_root:
            raise ValueError("fixture backend requires a fixture_root")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "endpoint": self.endpoint,
            "fixture_root": self.fixture_root,
            "timeout": self.timeout,
            "max_in_flight": self.max_in_flight,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackendDescriptor":
        return cls(
            kind=d["kind"],
            endpoint=d.get("endpoint"),
            fixture_root=d.get("fixture_root"),
            timeout=float(d.get("timeout", 30.0)),
            max_in_flight=int(d.get("max_in_flight", 4)),
        )


class Backend(Protocol):
    """What the pipeline needs from any detector/segmenter pair."""

    def detect(self, req: DetectRequest) -> list[RawDetection]: ...

    def segment(self, req: SegmentRequest) -> list[MaskRLE]: ...

    def health(self) -> dict: ...


def fixture_key(page_id: str, caption: str) -> str:
    """Detect fixture key: page id plus a 16-hex-char digest of the caption."""
    digest = hashlib.sha256(caption.encode("utf-8")).hexdigest()[:16]
    return f"{page_id}__{digest}"


def segment_fixture_key(page_id: str, boxes: Sequence[BBox]) -> str:
    """Segment fixture key: page id plus a digest of the box list."""
    payload = json.dumps([b.as_list() for b in boxes])
    digest = hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]
    return f"{page_id}__{digest}"


def _parse_detections(payload: dict, size: int) -> list[RawDetection]:
    """Validate a detect payload and clamp boxes to the image bounds.

    Boxes degenerate after clamping (zero width or height) are dropped;
    the drop count is logged.
    """
    try:
        jsonschema.validate(payload, wire_schema("detect_response"))
    except jsonschema.ValidationError as exc:
        raise ProtocolError(f"malformed detect response: {exc.message}", _excerpt(payload)) from exc

    space = CoordSpace(PREPROCESSED, width=size, height=size)
    out: list[RawDetection] = []
    dropped = 0
    for item in payload["detections"]:
        x0, y0, x1, y1 = (float(v) for v in item["box"])
        x0, x1 = max(0.0, min(x0, float(size))), max(0.0, min(x1, float(size)))
        y0, y1 = max(0.0, min(y0, float(size))), max(0.0, min(y1, float(size)))
        if not (x0 < x1 and y0 < y1):
            dropped += 1
            continue
        out.append(
            RawDetection(
                box=BBox(x0, y0, x1, y1, space=space),
                score=float(item["score"]),
                phrase=str(item["phrase"]),
            )
        )
    if dropped:
        log.warning("dropped %d degenerate box(es) after clamping", dropped)
    return out


def _parse_masks(payload: dict, n_boxes: int) -> list[MaskRLE]:
    try:
        jsonschema.validate(payload, wire_schema("segment_response"))
    except jsonschema.ValidationError as exc:
        raise ProtocolError(f"malformed segment response: {exc.message}", _excerpt(payload)) from exc
    masks_json = payload["masks"]
    if len(masks_json) != n_boxes:
        raise ProtocolError(f"sent {n_boxes} box(es) but received {len(masks_json)} mask(s)")
    masks = []
    for m in masks_json:
        try:
            masks.append(MaskRLE(height=int(m["size"][0]), width=int(m["size"][1]), counts=tuple(m["counts"])))
        except MalformedRLEError as exc:
            raise ProtocolError(f"invalid mask RLE: {exc}", _excerpt(m)) from exc
    return masks


class RemoteBackend:
    """HTTP client for the wire protocol with bounded retries.

    Transport failures (connection errors, timeouts, 5xx) are retried up
    to ``len(retry_delays)`` times with the given waits; anything that
    parses but violates the contract raises :class:`ProtocolError`
    immediately.
    """

    def __init__(
        self,
        endpoint: str,
        timeout: float = 30.0,
        max_in_flight: int = 4,
        session: Optional[requests.Session] = None,
        retry_delays: Sequence[float] = RETRY_DELAYS,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.max_in_flight = max_in_flight
        self._session = session or requests.Session()
        self._retry_delays = tuple(retry_delays)
        self._sleep = sleep

    def _request(self, method: str, path: str, body: Optional[dict] = None) -> dict:
        url = f"{self.endpoint}{path}"
        attempts = len(self._retry_delays) + 1
        last_error: Optional[Exception] = None
        for attempt in range(attempts):
            if attempt:
                self._sleep(self._retry_delays[attempt - 1])
            try:
                resp = self._session.request(method, url, json=body, timeout=self.timeout)
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_error = BackendError(f"{method} {url} failed: {exc}")
                continue
            if resp.status_code >= 500:
                last_error = BackendError(f"{method} {url} returned {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise ProtocolError(f"{method} {url} returned {resp.status_code}", _excerpt(resp.text))
            try:
                return resp.json()
            except ValueError as exc:
                raise ProtocolError(f"{method} {url} returned non-JSON body", _excerpt(resp.text)) from exc
        assert last_error is not None
        raise last_error

    def detect(self, req: DetectRequest) -> list[RawDetection]:
        body = {
            "image": base64.b64encode(req.image_png).decode("ascii"),
            "caption": req.caption,
            "box_threshold": req.box_threshold,
            "text_threshold": req.text_threshold,
        }
        payload = self._request("POST", "/v1/detect", body)
        return _parse_detections(payload, req.size)

    def segment(self, req: SegmentRequest) -> list[MaskRLE]:
        body = {
            "image": base64.b64encode(req.image_png).decode("ascii"),
            "boxes": [b.as_list() for b in req.boxes],
        }
        payload = self._request("POST", "/v1/segment", body)
        return _parse_masks(payload, len(req.boxes))

    def health(self) -> dict:
        payload = self._request("GET", "/v1/health")
        try:
            jsonschema.validate(payload, wire_schema("health_response"))
        except jsonschema.ValidationError as exc:
            raise ProtocolError(f"malformed health response: {exc.message}", _excerpt(payload)) from exc
        return payload


class FixtureBackend:
    """Deterministic replay of recorded responses.

    Layout: ``<fixture_root>/detect/<key>.json`` and
    ``<fixture_root>/segment/<key>.json``, one JSON response body per key.
    A pure function of ``(fixture_root, request)``: repeated calls return
    identical results.
    """

    def __init__(self, fixture_root: Union[str, Path]):
        self.fixture_root = Path(fixture_root)

    def _load(self, kind: str, key: str) -> dict:
        path = self.fixture_root / kind / f"{key}.json"
        if not path.is_file():
            raise FixtureNotFoundError(kind, key, str(self.fixture_root))
        try:
            return json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"fixture {path} is not valid JSON: {exc}") from exc

    def detect(self, req: DetectRequest) -> list[RawDetection]:
        payload = self._load("detect", fixture_key(req.page_id, req.caption))
        return _parse_detections(payload, req.size)

    def segment(self, req: SegmentRequest) -> list[MaskRLE]:
        payload = self._load("segment", segment_fixture_key(req.page_id, req.boxes))
        return _parse_masks(payload, len(req.boxes))

    def health(self) -> dict:
        if not self.fixture_root.is_dir():
            raise BackendError(f"fixture root {self.fixture_root} is not a directory")
        entries = sum(1 for _ in self.fixture_root.glob("*/*.json"))
        return {
            "status": "ok",
            "detector": "fixture",
            "segmenter": "fixture",
            "fixture_root": str(self.fixture_root),
            "entries": entries,
        }


class RecordingBackend:
    """Pass-through wrapper that records every response as a fixture file.

    Wrap a live :class:`RemoteBackend` once, then replay the run offline
    with a :class:`FixtureBackend` on the recorded directory.
    """

    def __init__(self, inner: Backend, fixture_root: Union[str, Path]):
        self.inner = inner
        self.fixture_root = Path(fixture_root)

    def _record(self, kind: str, key: str, payload: dict) -> None:
        path = self.fixture_root / kind / f"{key}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def detect(self, req: DetectRequest) -> list[RawDetection]:
        dets = self.inner.detect(req)
        payload = {
            "detections": [
                {"box": d.box.as_list(), "score": d.score, "phrase": d.phrase} for d in dets
            ]
        }
        self._record("detect", fixture_key(req.page_id, req.caption), payload)
        return dets

    def segment(self, req: SegmentRequest) -> list[MaskRLE]:
        masks = self.inner.segment(req)
        payload = {"masks": [{"size": list(m.size), "counts": list(m.counts)} for m in masks]}
        self._record("segment", segment_fixture_key(req.page_id, req.boxes), payload)
        return masks

    def health(self) -> dict:
        return self.inner.health()


def make_backend(desc: BackendDescriptor) -> Backend:
    if desc.kind == "remote":
        return RemoteBackend(desc.endpoint, timeout=desc.timeout, max_in_flight=desc.max_in_flight)
    return FixtureBackend(desc.fixture_root)
