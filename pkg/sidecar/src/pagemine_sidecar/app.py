"""FastAPI app implementing the detect/segment/health wire protocol."""

import base64
import binascii
import io
import logging
import threading
import time

from fastapi import FastAPI, HTTPException
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, Field

from .geometry import center_norm_to_corner_pixels, rle_encode_mask
from .models import Detector, Segmenter

log = logging.getLogger("pagemine_sidecar")


class DetectBody(BaseModel):
    image: str
    caption: str
    box_threshold: float = Field(default=0.35, gt=0.0, lt=1.0)
    text_threshold: float = Field(default=0.35, gt=0.0, lt=1.0)


class SegmentBody(BaseModel):
    image: str
    boxes: list[list[float]] = Field(min_length=1)


def _decode_image(b64: str) -> Image.Image:
    try:
        raw = base64.b64decode(b64, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise HTTPException(status_code=400, detail="image is not valid base64") from exc
    try:
        img = Image.open(io.BytesIO(raw))
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise HTTPException(status_code=400, detail="image bytes do not decode") from exc
    return img.convert("RGB")


def create_app(detector: Detector, segmenter: Segmenter, device: str = "cpu") -> FastAPI:
    app = FastAPI(title="pagemine-sidecar")
    # Model objects are not reentrant; HTTP workers queue on these.
    detect_lock = threading.Lock()
    segment_lock = threading.Lock()

    @app.post("/v1/detect")
    def serve_detect(body: DetectBody) -> dict:
        image = _decode_image(body.image)
        started = time.perf_counter()
        with detect_lock:
            native = detector.detect(image, body.caption, body.box_threshold, body.text_threshold)
        elapsed_ms = (time.perf_counter() - started) * 1000.0
        log.info("detect: %d hit(s) in %.1f ms (caption=%r)", len(native), elapsed_ms, body.caption)
        return {
            "detections": [
                {
                    "box": center_norm_to_corner_pixels(d.box, image.width, image.height),
                    "score": float(min(max(d.score, 0.0), 1.0)),
                    "phrase": d.phrase,
                }
                for d in native
            ]
        }

    @app.post("/v1/segment")
    def serve_segment(body: SegmentBody) -> dict:
        for i, box in enumerate(body.boxes):
            if len(box) != 4:
                raise HTTPException(status_code=422, detail=f"boxes[{i}] must have 4 numbers")
        image = _decode_image(body.image)
        started = time.perf_counter()
        with segment_lock:
            masks = segmenter.segment(image, body.boxes)
        elapsed_ms = (time.perf_counter() - started) * 1000.0
        log.info("segment: %d box(es) in %.1f ms", len(body.boxes), elapsed_ms)
        if len(masks) != len(body.boxes):
            raise HTTPException(
                status_code=500,
                detail=f"segmenter returned {len(masks)} mask(s) for {len(body.boxes)} box(es)",
            )
        expected_shape = (image.height, image.width)
        for i, mask in enumerate(masks):
            if mask.shape != expected_shape:
                raise HTTPException(
                    status_code=500,
                    detail=f"mask {i} has shape {mask.shape}, image is {expected_shape}",
                )
        return {"masks": [rle_encode_mask(m) for m in masks]}

    @app.get("/v1/health")
    def serve_health() -> dict:
        return {
            "status": "ok",
            "detector": detector.identifier,
            "segmenter": segmenter.identifier,
            "device": device,
        }

    return app
