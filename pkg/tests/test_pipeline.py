import random
from dataclasses import replace

import numpy as np
import pytest
from PIL import Image

from pagemine.backend import BackendDescriptor, RawDetection
from pagemine.core import ORIGINAL, PREPROCESSED, BBox, CoordSpace, Detection, iou, rle_decode, rle_encode
from pagemine.errors import FixtureNotFoundError, UsageError
from pagemine.pipeline import (
    PipelineConfig,
    detection_sort_key,
    nms,
    run_pipeline,
    segment_page,
    threshold_filter,
)
from pagemine.preprocess import PreprocessConfig, preprocess_page
from pagemine.prompts import PromptGroup, PromptSuite, compile_caption

from .oracles import nms_ref

PRE32 = CoordSpace(PREPROCESSED, 32, 32)


def raw(x0, y0, x1, y1, score, phrase="figure", space=PRE32):
    return RawDetection(box=BBox(x0, y0, x1, y1, space=space), score=score, phrase=phrase)


def det(x0, y0, x1, y1, score, cls="figure", phrase="figure", page="p01", space=None):
    return Detection(
        page_id=page, class_name=cls, phrase=phrase, score=score, box=BBox(x0, y0, x1, y1, space=space)
    )


class TestThresholdFilter:
    def test_boundary_is_inclusive(self):
        group = PromptGroup(class_name="figure", phrases=("figure",), box_threshold=0.35)
        dets = [raw(0, 0, 5, 5, 0.9), raw(0, 0, 5, 5, 0.35), raw(0, 0, 5, 5, 0.349)]
        kept = threshold_filter(dets, group)
        assert [d.score for d in kept] == [0.9, 0.35]

    def test_preserves_order(self):
        group = PromptGroup(class_name="figure", phrases=("figure",), box_threshold=0.5)
        dets = [raw(0, 0, 5, 5, 0.6, "a"), raw(0, 0, 5, 5, 0.2, "b"), raw(0, 0, 5, 5, 0.7, "c")]
        assert [d.phrase for d in threshold_filter(dets, group)] == ["a", "c"]


class TestNms:
    def test_worked_overlap(self):
        # IoU of these two is 81/119, just above 0.68
        a = det(0, 0, 10, 10, 0.9)
        b = det(1, 1, 11, 11, 0.8)
        assert iou(a.box, b.box) == 81 / 119
        assert nms([a, b], 0.5) == [a]
        assert nms([a, b], 0.7) == [a, b]

    def test_boundary_keeps_equal_iou(self):
        a = det(0, 0, 10, 10, 0.9)
        b = det(1, 1, 11, 11, 0.8)
        assert nms([a, b], 81 / 119) == [a, b]

    def test_disjoint_all_kept(self):
        dets = [det(i * 20, 0, i * 20 + 10, 10, 0.5 + i / 100) for i in range(4)]
        assert sorted(nms(dets, 0.5), key=detection_sort_key) == sorted(dets, key=detection_sort_key)

    def test_empty(self):
        assert nms([], 0.5) == []

    def test_score_ties_resolved_by_position(self):
        left = det(0, 0, 10, 10, 0.8)
        right = det(5, 0, 15, 10, 0.8)
        kept = nms([right, left], 0.3)
        assert kept == [left]
        assert nms([left, right], 0.3) == [left]

    def test_class_agnostic_suppresses_across_classes(self):
        a = det(0, 0, 10, 10, 0.9, cls="figure")
        b = det(0, 0, 10, 10, 0.8, cls="map")
        assert nms([a, b], 0.5, class_agnostic=True) == [a]
        assert nms([a, b], 0.5, class_agnostic=False) == [a, b]

    def test_idempotent(self):
        rng = random.Random(7)
        dets = [
            det(
                x0 := rng.uniform(0, 80),
                y0 := rng.uniform(0, 80),
                x0 + rng.uniform(1, 20),
                y0 + rng.uniform(1, 20),
                round(rng.uniform(0.1, 1.0), 2),
            )
            for _ in range(40)
        ]
        once = nms(dets, 0.4)
        assert nms(once, 0.4) == once

    def test_matches_reference(self):
        rng = random.Random(123)
        for _ in range(50):
            items = []
            for _k in range(rng.randrange(0, 25)):
                x0 = rng.uniform(0, 90)
                y0 = rng.uniform(0, 90)
                box = (x0, y0, x0 + rng.uniform(0.5, 30), y0 + rng.uniform(0.5, 30))
                score = rng.choice([0.3, 0.5, 0.5, 0.7, 0.9])
                cls = rng.choice(["figure", "map"])
                items.append((score, box, cls, cls))
            dets = [det(*b, s, cls=c, phrase=p) for s, b, c, p in items]
            thresh = rng.choice([0.3, 0.5, 0.75])
            agnostic = rng.random() < 0.5
            got = nms(dets, thresh, class_agnostic=agnostic)
            want = [dets[i] for i in nms_ref(items, thresh, class_agnostic=agnostic)]
            assert got == want

    def test_rejects_mixed_pages(self):
        with pytest.raises(UsageError):
            nms([det(0, 0, 5, 5, 0.5, page="a"), det(0, 0, 5, 5, 0.5, page="b")], 0.5)

    def test_rejects_mixed_spaces(self):
        orig = CoordSpace(ORIGINAL, 100, 100)
        with pytest.raises(UsageError):
            nms([det(0, 0, 5, 5, 0.5, space=PRE32), det(0, 0, 5, 5, 0.4, space=orig)], 0.5)


class TestSortKey:
    def test_orders_by_page_then_score_desc(self):
        d1 = det(0, 0, 5, 5, 0.4, page="a")
        d2 = det(0, 0, 5, 5, 0.9, page="b")
        d3 = det(0, 0, 5, 5, 0.8, page="a")
        assert sorted([d1, d2, d3], key=detection_sort_key) == [d3, d1, d2]


class ScriptedBackend:
    """In-memory backend: detections keyed by (page_id, caption), box-fill masks."""

    def __init__(self, script=None, mask_size=32):
        self.script = script or {}
        self.mask_size = mask_size
        self.segment_boxes = []

    def detect(self, req):
        entries = self.script.get((req.page_id, req.caption))
        if entries is None:
            raise FixtureNotFoundError("detect", f"{req.page_id}/{req.caption}", "<scripted>")
        space = CoordSpace(PREPROCESSED, req.size, req.size)
        return [raw(*box, score, phrase, space=space) for box, score, phrase in entries]

    def segment(self, req):
        self.segment_boxes.append((req.page_id, [b.as_list() for b in req.boxes]))
        masks = []
        for b in req.boxes:
            grid = np.zeros((self.mask_size, self.mask_size), dtype=bool)
            grid[int(b.y0) : int(b.y1), int(b.x0) : int(b.x1)] = True
            masks.append(rle_encode(grid))
        return masks

    def health(self):
        return {"status": "ok", "detector": "scripted", "segmenter": "scripted"}


SUITE = PromptSuite(
    suite_id="tiny",
    groups=(PromptGroup(class_name="figure", phrases=("figure", "diagram")),),
    nms_iou=0.5,
)
CAPTION = compile_caption(SUITE.groups[0])
DESC = BackendDescriptor(kind="fixture", fixture_root="<scripted>")


@pytest.fixture()
def two_pages(tmp_path):
    """Two small pages preprocessed into a run dir at target size 32."""
    cfg = PreprocessConfig(target_size=32)
    run_dir = tmp_path / "run"
    run_dir.mkdir()
    pages = []
    for pid, (w, h) in (("p01", (64, 32)), ("p02", (32, 32))):
        src = tmp_path / f"{pid}.png"
        arr = np.linspace(30, 220, w * h, dtype=np.uint8).reshape(h, w)
        Image.fromarray(arr).save(src)
        pages.append(preprocess_page(src, cfg, run_dir, page_id=pid))
    return run_dir, pages


class TestRunPipeline:
    def test_full_run_maps_sorts_and_segments(self, two_pages):
        run_dir, pages = two_pages
        script = {
            ("p01", CAPTION): [
                ((4, 4, 16, 16), 0.9, "figure"),
                ((5, 5, 16, 16), 0.7, "diagram"),  # suppressed, IoU > 0.5
                ((20, 20, 30, 30), 0.2, "figure"),  # below threshold
            ],
            ("p02", CAPTION): [((8, 8, 24, 24), 0.6, "figure")],
        }
        backend = ScriptedBackend(script)
        run = run_pipeline(pages, SUITE, backend, PipelineConfig(target_size=32), "r1", run_dir, DESC)

        assert run.errors == []
        assert [(d.page_id, d.score) for d in run.detections] == [("p01", 0.9), ("p02", 0.6)]
        # p01 is 64x32 so sx = 0.5: preprocessed x doubles back to original
        d = run.detections[0]
        assert d.box.space.tag == ORIGINAL
        assert d.box.as_list() == [8.0, 4.0, 32.0, 16.0]
        assert all(d.mask is not None for d in run.detections)
        assert set(run.timing) == {"detect", "nms", "map", "segment"}

    def test_segment_disabled_leaves_masks_none(self, two_pages):
        run_dir, pages = two_pages
        backend = ScriptedBackend({("p01", CAPTION): [((4, 4, 16, 16), 0.9, "figure")], ("p02", CAPTION): []})
        cfg = PipelineConfig(target_size=32, segment=False)
        run = run_pipeline(pages, SUITE, backend, cfg, "r1", run_dir, DESC)
        assert run.detections and all(d.mask is None for d in run.detections)
        assert backend.segment_boxes == []

    def test_segment_request_rebuilds_preprocessed_boxes(self, two_pages):
        run_dir, pages = two_pages
        backend = ScriptedBackend({("p01", CAPTION): [((4, 4, 16, 16), 0.9, "figure")], ("p02", CAPTION): []})
        run_pipeline(pages, SUITE, backend, PipelineConfig(target_size=32), "r1", run_dir, DESC)
        assert backend.segment_boxes == [("p01", [[4.0, 4.0, 16.0, 16.0]])]

    def test_failed_page_does_not_abort_run(self, two_pages):
        run_dir, pages = two_pages
        backend = ScriptedBackend({("p02", CAPTION): [((8, 8, 24, 24), 0.6, "figure")]})
        run = run_pipeline(pages, SUITE, backend, PipelineConfig(target_size=32), "r1", run_dir, DESC)
        assert [(e.page_id, e.stage, e.kind) for e in run.errors] == [("p01", "detect", "FixtureNotFoundError")]
        assert [d.page_id for d in run.detections] == ["p02"]

    def test_missing_preprocessed_file_is_read_error(self, two_pages):
        run_dir, pages = two_pages
        broken = replace(pages[0], preprocessed_image_uri="preprocessed/gone.png")
        backend = ScriptedBackend({("p02", CAPTION): []})
        run = run_pipeline([broken, pages[1]], SUITE, backend, PipelineConfig(target_size=32), "r1", run_dir, DESC)
        assert [(e.page_id, e.stage) for e in run.errors] == [("p01", "read")]

    def test_output_independent_of_worker_count(self, two_pages):
        run_dir, pages = two_pages
        script = {
            ("p01", CAPTION): [((4, 4, 16, 16), 0.9, "figure"), ((18, 2, 28, 12), 0.8, "diagram")],
            ("p02", CAPTION): [((8, 8, 24, 24), 0.6, "figure")],
        }
        runs = []
        for workers in (1, 4):
            desc = BackendDescriptor(kind="fixture", fixture_root="<scripted>", max_in_flight=workers)
            backend = ScriptedBackend(script)
            runs.append(run_pipeline(pages, SUITE, backend, PipelineConfig(target_size=32), "r", run_dir, desc))
        assert runs[0].detections == runs[1].detections

    def test_zero_pages(self, two_pages):
        run_dir, _ = two_pages
        run = run_pipeline([], SUITE, ScriptedBackend(), PipelineConfig(target_size=32), "r1", run_dir, DESC)
        assert run.detections == [] and run.errors == []

    def test_nms_iou_override(self, two_pages):
        run_dir, pages = two_pages
        # IoU of the pair is 81/119 > 0.5 but < 0.7
        script = {
            ("p02", CAPTION): [((0, 0, 10, 10), 0.9, "figure"), ((1, 1, 11, 11), 0.8, "figure")],
            ("p01", CAPTION): [],
        }
        keep_both = PipelineConfig(target_size=32, nms_iou=0.7, segment=False)
        suppress = PipelineConfig(target_size=32, segment=False)
        assert len(run_pipeline(pages, SUITE, ScriptedBackend(script), keep_both, "r", run_dir, DESC).detections) == 2
        assert len(run_pipeline(pages, SUITE, ScriptedBackend(script), suppress, "r", run_dir, DESC).detections) == 1


class TestSegmentPage:
    def test_empty_detections_short_circuit(self, two_pages):
        run_dir, pages = two_pages
        backend = ScriptedBackend()
        assert segment_page(pages[0], [], backend, run_dir) == []
        assert backend.segment_boxes == []

    def test_masks_attach_in_order(self, two_pages):
        run_dir, pages = two_pages
        dets = [
            det(2, 2, 10, 10, 0.9, page="p02", space=CoordSpace(ORIGINAL, 32, 32)),
            det(12, 12, 20, 20, 0.5, page="p02", space=CoordSpace(ORIGINAL, 32, 32)),
        ]
        out = segment_page(pages[1], dets, ScriptedBackend(), run_dir)
        assert [rle_decode(d.mask).sum() for d in out] == [64, 64]
        assert [d.box for d in out] == [d.box for d in dets]
