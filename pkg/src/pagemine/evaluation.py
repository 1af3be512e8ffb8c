"""Average-precision evaluation of detections against box ground truth.

Detections are matched greedily to ground-truth boxes per page and class
(highest score first, each ground-truth box consumed at most once), and
each class gets an all-point interpolated AP: the area under the
precision envelope ``p(r) = max precision at recall >= r``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence, TypeVar

from .core import PREPROCESSED, BBox, Detection, iou
from .errors import CastingError, UsageError
from .pipeline import PipelineRun


@dataclass(frozen=True)
class GtBox:
    """One annotated ground-truth box in original coordinates."""

    page_id: str
    class_name: str
    box: BBox


@dataclass(frozen=True)
class EvalConfig:
    iou_thresh: float = 0.5
    class_cast: Optional[Mapping[str, str]] = None
    strict_cast: bool = False

    def __post_init__(self):
        if not (0.0 < self.iou_thresh < 1.0):
            raise ValueError(f"iou_thresh must be in (0, 1), got {self.iou_thresh}")
        if self.class_cast is not None:
            object.__setattr__(self, "class_cast", dict(self.class_cast))


@dataclass(frozen=True)
class PrPoint:
    """One point of a class PR curve, taken after each scored detection."""

    recall: float
    precision: float
    score: float


@dataclass(frozen=True)
class ClassEval:
    class_name: str
    ap: Optional[float]
    n_gt: int
    tp: int
    fp: int
    fn: int
    pr: tuple[PrPoint, ...]


@dataclass(frozen=True)
class EvalReport:
    per_class: tuple[ClassEval, ...]
    macro_ap: Optional[float]
    iou_thresh: float
    class_cast: Optional[dict]
    suite_id: Optional[str] = None


Classed = TypeVar("Classed", Detection, GtBox)


def cast_classes(
    items: Sequence[Classed],
    mapping: Optional[Mapping[str, str]],
    strict: bool = False,
) -> list[Classed]:
    """Rewrite class names through a cast map, leaving everything else intact.

    Classes missing from the map pass through unchanged unless ``strict``,
    in which case they raise :class:`CastingError`.
    """
    if not mapping:
        return list(items)
    out = []
    for item in items:
        if item.class_name in mapping:
            out.append(replace(item, class_name=mapping[item.class_name]))
        elif strict:
            raise CastingError(f"class {item.class_name!r} is not covered by the cast map")
        else:
            out.append(item)
    return out


def _check_original_space(boxes: Sequence[BBox]) -> None:
    for b in boxes:
        if b.space is not None and b.space.tag == PREPROCESSED:
            raise UsageError("evaluation expects original-space boxes, got preprocessed ones")


def match_greedy(dets: Sequence[Detection], gts: Sequence[GtBox], iou_thresh: float) -> list[bool]:
    """Label each detection TP/FP against ground truth of the same class.

    Detections are visited by descending score (ties: input order); each
    claims the unmatched ground-truth box on its page with the highest IoU,
    provided that IoU reaches ``iou_thresh``. A second detection on an
    already-claimed box is a false positive. Returns labels aligned with
    the input order of ``dets``.
    """
    _check_original_space([d.box for d in dets])
    _check_original_space([g.box for g in gts])

    gt_by_page: dict[str, list[int]] = {}
    for j, g in enumerate(gts):
        gt_by_page.setdefault(g.page_id, []).append(j)

    labels = [False] * len(dets)
    claimed: set[int] = set()
    for i in sorted(range(len(dets)), key=lambda k: (-dets[k].score, k)):
        d = dets[i]
        best_j = -1
        best_iou = 0.0
        for j in gt_by_page.get(d.page_id, ()):
            if j in claimed:
                continue
            overlap = iou(d.box, gts[j].box)
            if overlap > best_iou:
                best_iou = overlap
                best_j = j
        if best_j >= 0 and best_iou >= iou_thresh:
            labels[i] = True
            claimed.add(best_j)
    return labels


def average_precision(labels: Sequence[bool], scores: Sequence[float], n_gt: int) -> Optional[float]:
    """All-point interpolated AP from aligned TP labels and scores.

    Only the score ranking matters (ties resolved by input order). With no
    ground truth the metric is undefined (``None``) unless detections
    exist, which then all count as false positives (AP 0).
    """
    if len(labels) != len(scores):
        raise UsageError(f"{len(labels)} labels vs {len(scores)} scores")
    if n_gt < 0:
        raise UsageError(f"n_gt must be >= 0, got {n_gt}")
    if n_gt == 0:
        return None if not labels else 0.0
    if not labels:
        return 0.0

    order = sorted(range(len(labels)), key=lambda k: (-scores[k], k))
    tp = 0
    points: list[tuple[float, float]] = []  # (recall, precision) after each detection
    for rank, k in enumerate(order, start=1):
        if labels[k]:
            tp += 1
        points.append((tp / n_gt, tp / rank))

    # precision envelope: running max from the right
    envelope = [0.0] * len(points)
    best = 0.0
    for i in range(len(points) - 1, -1, -1):
        best = max(best, points[i][1])
        envelope[i] = best

    ap = 0.0
    prev_recall = 0.0
    for i, (recall, _) in enumerate(points):
        ap += (recall - prev_recall) * envelope[i]
        prev_recall = recall
    return ap


def _evaluate_class(dets: Sequence[Detection], gts: Sequence[GtBox], cfg: EvalConfig, name: str) -> ClassEval:
    labels = match_greedy(dets, gts, cfg.iou_thresh)
    scores = [d.score for d in dets]
    ap = average_precision(labels, scores, len(gts))

    order = sorted(range(len(dets)), key=lambda k: (-scores[k], k))
    tp = 0
    pr = []
    for rank, k in enumerate(order, start=1):
        if labels[k]:
            tp += 1
        recall = tp / len(gts) if gts else 0.0
        pr.append(PrPoint(recall=recall, precision=tp / rank, score=scores[k]))

    n_tp = sum(labels)
    return ClassEval(
        class_name=name,
        ap=ap,
        n_gt=len(gts),
        tp=n_tp,
        fp=len(dets) - n_tp,
        fn=len(gts) - n_tp,
        pr=tuple(pr),
    )


def evaluate_detections(
    detections: Sequence[Detection],
    gt: Sequence[GtBox],
    cfg: EvalConfig,
    suite_id: Optional[str] = None,
) -> EvalReport:
    """Per-class greedy matching + AP, macro-averaged over classes with ground truth."""
    dets = cast_classes(detections, cfg.class_cast, strict=cfg.strict_cast)
    gts = cast_classes(gt, cfg.class_cast, strict=cfg.strict_cast)

    classes = sorted({g.class_name for g in gts} | {d.class_name for d in dets})
    per_class = []
    for name in classes:
        dcls = [d for d in dets if d.class_name == name]
        gcls = [g for g in gts if g.class_name == name]
        per_class.append(_evaluate_class(dcls, gcls, cfg, name))

    with_gt = [c.ap for c in per_class if c.n_gt > 0]
    macro = sum(with_gt) / len(with_gt) if with_gt else None
    return EvalReport(
        per_class=tuple(per_class),
        macro_ap=macro,
        iou_thresh=cfg.iou_thresh,
        class_cast=dict(cfg.class_cast) if cfg.class_cast else None,
        suite_id=suite_id,
    )


def evaluate(run: PipelineRun, gt: Sequence[GtBox], cfg: EvalConfig) -> EvalReport:
    """Evaluate a pipeline run's detections against ground truth."""
    return evaluate_detections(run.detections, gt, cfg, suite_id=run.suite.suite_id)
