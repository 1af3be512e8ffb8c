#!/usr/bin/env python3
"""Regenerate the synthetic test corpus in this directory.

Produces six page scans, COCO ground truth (class "illustration"), two
prompt suites and a full set of backend fixtures:

* ``basic``    {figure}: finds body parts and ornaments, so most boxes
  under-cover their ground-truth element (2 TP / 5 FP, AP = 5/42).
* ``enriched`` {figure - drawing - diagram - illustration}: finds whole
  elements (6 TP / 1 FP, AP = 6/7).

One page (p03) only yields a sub-threshold score and one page (p05) has
no ground truth at all. Two boxes on p02 overlap enough to exercise NMS.
Everything is deterministic arithmetic; rerunning the script rewrites
identical bytes. Segment fixtures are produced by running the real
pipeline against the detect fixtures and synthesizing one rectangle mask
per surviving box, so their keys match what the pipeline will ask for.
"""

from __future__ import annotations

import json
import sys
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from pagemine.backend import (
    DetectRequest,
    FixtureBackend,
    SegmentRequest,
    fixture_key,
    segment_fixture_key,
)
from pagemine.core import BBox, map_box, rle_encode
from pagemine.pipeline import PipelineConfig, run_pipeline
from pagemine.preprocess import PreprocessConfig, preprocess_page
from pagemine.prompts import PromptGroup, PromptSuite, compile_caption, suite_to_dict

HERE = Path(__file__).resolve().parent

PAGE_SIZES = {  # page_id -> (width, height)
    "p01": (800, 1200),
    "p02": (1200, 900),
    "p03": (600, 900),
    "p04": (900, 600),
    "p05": (1000, 1000),
    "p06": (640, 960),
}

# Ground truth, original space, class "illustration".
GT = {
    "p01": [(100, 150, 700, 650), (520, 900, 680, 1100)],
    "p02": [(100, 100, 500, 500), (700, 200, 1100, 700)],
    "p03": [(150, 200, 450, 700)],
    "p04": [(200, 100, 700, 500)],
    "p05": [],
    "p06": [(80, 120, 560, 840)],
}

SUITES = {
    "basic": ["figure"],
    "enriched": ["figure", "drawing", "diagram", "illustration"],
}


def shrink(box, f):
    """Scale a box around its center; IoU with the original is f*f."""
    x0, y0, x1, y1 = box
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    w, h = (x1 - x0) * f / 2, (y1 - y0) * f / 2
    return (cx - w, cy - h, cx + w, cy + h)


def subbox(box, fx0, fy0, fx1, fy1):
    """Fractional window into a box (0..1 per axis)."""
    x0, y0, x1, y1 = box
    w, h = x1 - x0, y1 - y0
    return (x0 + fx0 * w, y0 + fy0 * h, x0 + fx1 * w, y0 + fy1 * h)


# Scripted detector behavior per suite: (page_id, original-space box, score, phrase).
# Scores below 0.35 are exercise material for the threshold filter; the two
# p02 entries at 0.70/0.66 (basic) and 0.74/0.66 (enriched) overlap past the
# 0.5 NMS threshold so exactly one survives.
def detection_script():
    p01a, p01b = GT["p01"]
    p02a, p02b = GT["p02"]
    p03a = GT["p03"][0]
    p04a = GT["p04"][0]
    p06a = GT["p06"][0]
    return {
        "basic": [
            ("p01", subbox(p01a, 0.10, 0.05, 0.60, 0.65), 0.82, "figure"),
            ("p01", subbox(p01a, 0.55, 0.40, 0.95, 0.95), 0.55, "figure"),
            ("p01", subbox(p01b, 0.20, 0.20, 0.50, 0.50), 0.10, "figure"),
            ("p02", shrink(p02a, 0.96), 0.78, "figure"),
            ("p02", subbox(p02b, 0.00, 0.00, 0.55, 0.60), 0.70, "figure"),
            ("p02", subbox(p02b, 0.05, 0.00, 0.70, 0.60), 0.66, "figure"),
            ("p03", shrink(p03a, 0.95), 0.20, "figure"),
            ("p04", shrink(p04a, 0.97), 0.50, "figure"),
            ("p05", (420, 430, 580, 570), 0.60, "figure"),
            ("p06", subbox(p06a, 0.05, 0.05, 0.55, 0.62), 0.45, "figure"),
        ],
        "enriched": [
            ("p01", shrink(p01a, 0.96), 0.88, "illustration"),
            ("p01", shrink(p01b, 0.94), 0.52, "drawing"),
            ("p02", shrink(p02a, 0.96), 0.80, "figure"),
            ("p02", shrink(p02b, 0.95), 0.74, "illustration"),
            ("p02", shrink(p02b, 0.90), 0.66, "drawing"),
            ("p03", shrink(p03a, 0.95), 0.20, "figure"),
            ("p04", shrink(p04a, 0.96), 0.68, "illustration"),
            ("p05", (0, 0, 160, 140), 0.40, "diagram"),
            ("p06", shrink(p06a, 0.97), 0.77, "drawing"),
        ],
    }


def render_page(page_id: str) -> np.ndarray:
    """Paint a plausible scan: text lines, hatched woodcuts, one ornament."""
    w, h = PAGE_SIZES[page_id]
    img = np.full((h, w), 225, dtype=np.uint8)

    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]

    text_rows = (ys % 28 < 6) & (xs > w // 10) & (xs < w - w // 10)
    img[text_rows] = 150

    for x0, y0, x1, y1 in GT[page_id]:
        hatch = ((xs + ys) % 13 < 2)
        region = (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
        img[region] = np.where(hatch, 90, 185)[region]
        border = region & ~(
            (xs >= x0 + 4) & (xs < x1 - 4) & (ys >= y0 + 4) & (ys < y1 - 4)
        )
        img[border] = 60

    if page_id == "p05":
        diamond = (np.abs(xs - 500) + np.abs(ys - 500)) < 70
        img[diamond] = 70
        sepia = np.stack([img, (img * 0.92).astype(np.uint8), (img * 0.78).astype(np.uint8)], axis=-1)
        return sepia
    return img


def write_pages() -> None:
    pages_dir = HERE / "pages"
    pages_dir.mkdir(exist_ok=True)
    for page_id in PAGE_SIZES:
        Image.fromarray(render_page(page_id)).save(pages_dir / f"{page_id}.png", format="PNG")


def write_gt() -> None:
    image_ids = {pid: i + 1 for i, pid in enumerate(sorted(PAGE_SIZES))}
    annotations = []
    for pid in sorted(GT):
        for box in GT[pid]:
            x0, y0, x1, y1 = box
            annotations.append(
                {
                    "id": len(annotations) + 1,
                    "image_id": image_ids[pid],
                    "category_id": 1,
                    "bbox": [x0, y0, x1 - x0, y1 - y0],
                    "area": (x1 - x0) * (y1 - y0),
                    "iscrowd": 0,
                }
            )
    coco = {
        "images": [
            {"id": image_ids[pid], "file_name": f"{pid}.png", "width": PAGE_SIZES[pid][0], "height": PAGE_SIZES[pid][1]}
            for pid in sorted(PAGE_SIZES)
        ],
        "annotations": annotations,
        "categories": [{"id": 1, "name": "illustration"}],
    }
    (HERE / "gt.json").write_text(json.dumps(coco, sort_keys=True, indent=2) + "\n")


def build_suite(suite_id: str) -> PromptSuite:
    return PromptSuite(
        suite_id=suite_id,
        groups=(PromptGroup(class_name="illustration", phrases=tuple(SUITES[suite_id])),),
    )


def write_suites() -> None:
    suites_dir = HERE / "suites"
    suites_dir.mkdir(exist_ok=True)
    for suite_id in SUITES:
        path = suites_dir / f"{suite_id}.json"
        path.write_text(json.dumps(suite_to_dict(build_suite(suite_id)), sort_keys=True, indent=2) + "\n")


def write_detect_fixtures(pages_by_id: dict) -> None:
    script = detection_script()
    detect_dir = HERE / "fixtures" / "detect"
    detect_dir.mkdir(parents=True, exist_ok=True)
    for suite_id, entries in script.items():
        caption = compile_caption(build_suite(suite_id).groups[0])
        for page_id in PAGE_SIZES:
            transform = pages_by_id[page_id].transform
            detections = []
            for pid, box, score, phrase in entries:
                if pid != page_id:
                    continue
                pre = map_box(BBox(*box), transform, "to_preprocessed")
                detections.append({"box": pre.as_list(), "score": score, "phrase": phrase})
            key = fixture_key(page_id, caption)
            payload = {"detections": detections}
            (detect_dir / f"{key}.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


class MaskSynthesizer:
    """Fixture detect + synthetic segment that records its own fixtures.

    Masks fill the integerized request box, so a box touching the top-left
    corner produces the leading-zero RLE form.
    """

    def __init__(self, fixture_root: Path, size: int):
        self.inner = FixtureBackend(fixture_root)
        self.fixture_root = fixture_root
        self.size = size

    def detect(self, req: DetectRequest):
        return self.inner.detect(req)

    def segment(self, req: SegmentRequest):
        masks = []
        for box in req.boxes:
            grid = np.zeros((self.size, self.size), dtype=np.uint8)
            x0 = max(0, int(np.floor(box.x0)))
            y0 = max(0, int(np.floor(box.y0)))
            x1 = min(self.size, int(np.ceil(box.x1)))
            y1 = min(self.size, int(np.ceil(box.y1)))
            grid[y0:y1, x0:x1] = 1
            masks.append(rle_encode(grid))
        key = segment_fixture_key(req.page_id, req.boxes)
        payload = {"masks": [{"size": list(m.size), "counts": list(m.counts)} for m in masks]}
        path = self.fixture_root / "segment" / f"{key}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
        return masks

    def health(self):
        return self.inner.health()


def main() -> int:
    write_pages()
    write_gt()
    write_suites()

    cfg = PreprocessConfig()
    with tempfile.TemporaryDirectory() as tmp:
        pages = [preprocess_page(HERE / "pages" / f"{pid}.png", cfg, tmp) for pid in sorted(PAGE_SIZES)]
        pages_by_id = {p.page_id: p for p in pages}
        write_detect_fixtures(pages_by_id)

        from pagemine.backend import BackendDescriptor

        desc = BackendDescriptor(kind="fixture", fixture_root=str(HERE / "fixtures"))
        for suite_id in SUITES:
            backend = MaskSynthesizer(HERE / "fixtures", cfg.target_size)
            run = run_pipeline(
                pages=pages,
                suite=build_suite(suite_id),
                backend=backend,
                cfg=PipelineConfig(segment=True, target_size=cfg.target_size),
                run_id=f"corpus-{suite_id}",
                run_dir=tmp,
                backend_desc=desc,
            )
            if run.errors:
                raise SystemExit(f"corpus generation failed for {suite_id}: {run.errors}")
            n_masks = sum(1 for d in run.detections if d.mask is not None)
            print(f"{suite_id}: {len(run.detections)} detections, {n_masks} masks")

        # replay through the pure fixture backend to prove the files suffice
        for suite_id in SUITES:
            replay = run_pipeline(
                pages=pages,
                suite=build_suite(suite_id),
                backend=FixtureBackend(HERE / "fixtures"),
                cfg=PipelineConfig(segment=True, target_size=cfg.target_size),
                run_id=f"replay-{suite_id}",
                run_dir=tmp,
                backend_desc=desc,
            )
            if replay.errors:
                raise SystemExit(f"replay failed for {suite_id}: {replay.errors}")
    print(f"corpus written under {HERE}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
