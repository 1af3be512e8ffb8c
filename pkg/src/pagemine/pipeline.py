"""Detection post-processing and per-run orchestration.

For each page the pipeline runs one detector call per prompt group,
filters by score, pools all groups, suppresses duplicates with greedy
NMS, optionally segments the survivors in a single call, and maps the
resulting boxes back to original coordinates. Pages are independent and
processed by a bounded worker pool; the final detection list is sorted
deterministically so identical backend responses always yield identical
output.
"""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

from .backend import Backend, BackendDescriptor, DetectRequest, RawDetection, SegmentRequest
from .core import Detection, iou, map_box
from .errors import PageMineError, UsageError
from .preprocess import PageRecord, resolve_uri
from .prompts import PromptGroup, PromptSuite, compile_caption

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    """Execution knobs independent of the prompt suite."""

    class_agnostic_nms: bool = True
    nms_iou: Optional[float] = None  # None: use the suite's value
    segment: bool = True
    target_size: int = 1000


@dataclass(frozen=True)
class PageError:
    """One page that failed during a run; the run continues without it."""

    page_id: str
    stage: str
    kind: str
    message: str


@dataclass
class PipelineRun:
    """Everything produced by one pass over a set of pages."""

    run_id: str
    suite: PromptSuite
    backend: BackendDescriptor
    pages: list[PageRecord]
    timing: dict[str, float] = field(default_factory=dict)
    detections: list[Detection] = field(default_factory=list)
    errors: list[PageError] = field(default_factory=list)


def threshold_filter(dets: Sequence[RawDetection], g: PromptGroup) -> list[RawDetection]:
    """Keep detections scoring at or above the group's box threshold.

    The boundary is inclusive; input order is preserved.
    """
    return [d for d in dets if d.score >= g.box_threshold]


def _nms_sort_key(d: Detection):
    # score desc, then smaller x0, y0, class name; trailing keys only
    # disambiguate fully identical front keys for determinism
    return (-d.score, d.box.x0, d.box.y0, d.class_name, d.box.x1, d.box.y1, d.phrase)


def nms(dets: Sequence[Detection], iou_thresh: float, class_agnostic: bool = True) -> list[Detection]:
    """Greedy non-maximum suppression over one page.

    Candidates are visited by descending score (ties: smaller x0, then y0,
    then class name) and kept iff their IoU with every already-kept
    detection is at or below ``iou_thresh``. Suppression ignores classes
    by default so each object survives once; ``class_agnostic=False``
    restricts suppression to same-class pairs for class-differentiation
    runs. Kept detections retain their class and phrase.
    """
    if not dets:
        return []
    if len({d.page_id for d in dets}) > 1:
        raise UsageError("nms operates on a single page at a time")
    spaces = {d.box.space for d in dets if d.box.space is not None}
    if len(spaces) > 1:
        raise UsageError(f"nms needs one coordinate space, got {sorted(s.tag for s in spaces)}")

    kept: list[Detection] = []
    for d in sorted(dets, key=_nms_sort_key):
        rivals = kept if class_agnostic else [k for k in kept if k.class_name == d.class_name]
        if all(iou(d.box, k.box) <= iou_thresh for k in rivals):
            kept.append(d)
    return kept


def detection_sort_key(d: Detection):
    return (d.page_id, -d.score, d.class_name, d.box.x0, d.box.y0, d.box.x1, d.box.y1, d.phrase)


class _StageClock:
    """Accumulates per-stage wall-clock seconds across worker threads."""

    def __init__(self):
        self.totals: dict[str, float] = {}
        self._lock = threading.Lock()

    def add(self, stage: str, seconds: float) -> None:
        with self._lock:
            self.totals[stage] = self.totals.get(stage, 0.0) + seconds


class _StageFailure(Exception):
    """Internal: tags a page failure with the stage it happened in."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(str(cause))
        self.stage = stage
        self.cause = cause


def _process_page(
    page: PageRecord,
    suite: PromptSuite,
    backend: Backend,
    cfg: PipelineConfig,
    run_dir: Path,
    clock: _StageClock,
) -> list[Detection]:
    try:
        png_bytes = resolve_uri(run_dir, page.preprocessed_image_uri).read_bytes()
    except OSError as exc:
        raise _StageFailure("read", exc) from exc

    pooled: list[Detection] = []
    for group in suite.groups:
        caption = compile_caption(group)
        req = DetectRequest(
            page_id=page.page_id,
            image_png=png_bytes,
            caption=caption,
            box_threshold=group.box_threshold,
            text_threshold=group.text_threshold,
            size=cfg.target_size,
        )
        t0 = time.perf_counter()
        try:
            raw = backend.detect(req)
        except PageMineError as exc:
            raise _StageFailure("detect", exc) from exc
        finally:
            clock.add("detect", time.perf_counter() - t0)
        for r in threshold_filter(raw, group):
            pooled.append(
                Detection(
                    page_id=page.page_id,
                    class_name=group.class_name,
                    phrase=r.phrase,
                    score=r.score,
                    box=r.box,
                )
            )

    t0 = time.perf_counter()
    iou_thresh = cfg.nms_iou if cfg.nms_iou is not None else suite.nms_iou
    survivors = nms(pooled, iou_thresh, class_agnostic=cfg.class_agnostic_nms)
    clock.add("nms", time.perf_counter() - t0)

    t0 = time.perf_counter()
    mapped = [
        replace(d, box=map_box(d.box, page.transform, "to_original", target_space=page.original))
        for d in survivors
    ]
    # Canonical persisted order. Segmentation happens after this sort so a
    # later standalone segment pass over the persisted run rebuilds the very
    # same box sequence (and fixture keys).
    mapped.sort(key=detection_sort_key)
    clock.add("map", time.perf_counter() - t0)

    if cfg.segment and mapped:
        t0 = time.perf_counter()
        try:
            mapped = segment_page(page, mapped, backend, run_dir)
        except PageMineError as exc:
            raise _StageFailure("segment", exc) from exc
        finally:
            clock.add("segment", time.perf_counter() - t0)
    return mapped


def segment_page(
    page: PageRecord,
    dets: Sequence[Detection],
    backend: Backend,
    run_dir: Union[str, Path],
) -> list[Detection]:
    """Fetch one mask per detection on a page and attach them in order.

    Boxes are rebuilt in preprocessed space from the original-space boxes,
    so the request is identical whether it happens inline or from a loaded
    run.
    """
    if not dets:
        return []
    png_bytes = resolve_uri(Path(run_dir), page.preprocessed_image_uri).read_bytes()
    boxes = tuple(map_box(d.box, page.transform, "to_preprocessed") for d in dets)
    req = SegmentRequest(page_id=page.page_id, image_png=png_bytes, boxes=boxes)
    masks = backend.segment(req)
    return [replace(d, mask=m) for d, m in zip(dets, masks)]


def run_pipeline(
    pages: Sequence[PageRecord],
    suite: PromptSuite,
    backend: Backend,
    cfg: PipelineConfig,
    run_id: str,
    run_dir: Union[str, Path],
    backend_desc: BackendDescriptor,
) -> PipelineRun:
    """Detect (and optionally segment) every page with the given suite.

    Backend failures abort only the affected page; the failure lands in
    ``run.errors`` and the caller decides the exit status. Output order is
    independent of worker scheduling: detections are sorted by
    ``(page_id, score desc, ...)`` at the end.
    """
    run_dir = Path(run_dir)
    clock = _StageClock()
    detections: list[Detection] = []
    errors: list[PageError] = []

    def work(page: PageRecord):
        try:
            return page, _process_page(page, suite, backend, cfg, run_dir, clock), None
        except _StageFailure as exc:
            return page, [], PageError(
                page_id=page.page_id,
                stage=exc.stage,
                kind=type(exc.cause).__name__,
                message=str(exc.cause),
            )

    max_workers = max(1, backend_desc.max_in_flight)
    if max_workers == 1 or len(pages) <= 1:
        results = [work(p) for p in pages]
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(work, pages))

    for page, dets, err in results:
        detections.extend(dets)
        if err is not None:
            log.warning("page %s failed during %s: %s", page.page_id, err.stage, err.message)
            errors.append(err)

    detections.sort(key=detection_sort_key)
    errors.sort(key=lambda e: (e.page_id, e.stage))
    return PipelineRun(
        run_id=run_id,
        suite=suite,
        backend=backend_desc,
        pages=list(pages),
        timing=clock.totals,
        detections=detections,
        errors=errors,
    )
