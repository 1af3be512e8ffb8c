"""Run persistence, COCO ground-truth ingest, and curated dataset export.

A persisted run directory looks like::

    <run_dir>/                 run_id == directory name
      manifest.json            run id, creation time, tool version, config snapshot, page records
      timings.json             cumulative per-stage seconds (bookkeeping, refreshed each command)
      detections.json          deterministic, sorted; both coordinate spaces per detection
      errors.json              per-page failures
      preprocessed/<id>.png    preprocessed page rasters
      decisions.jsonl          append-only review decisions (written by the review service)
      .lock                    writer lock

All JSON data files are written atomically with sorted keys, so
re-running a stage on unchanged inputs reproduces them byte for byte.
Floats are serialized with Python's shortest round-trip representation,
which keeps persist/load lossless.
"""

from __future__ import annotations

import datetime as _dt
import json
import math
import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from filelock import FileLock
from PIL import Image

from . import __version__ as TOOL_VERSION
from .backend import BackendDescriptor
from .core import ORIGINAL, BBox, CoordSpace, AffineMap, Detection, MaskRLE, rle_decode, rle_encode
from .errors import ExportError, IngestError
from .evaluation import EvalReport, GtBox
from .pipeline import PageError, PipelineRun, detection_sort_key
from .preprocess import PageRecord, PreprocessConfig, load_raster
from .prompts import suite_from_dict, suite_to_dict

_RUN_ID_RE = re.compile(r"^[A-Za-z0-9._-]+$")

MANIFEST_NAME = "manifest.json"
TIMINGS_NAME = "timings.json"
DETECTIONS_NAME = "detections.json"
ERRORS_NAME = "errors.json"
DECISIONS_NAME = "decisions.jsonl"
LOCK_NAME = ".lock"


def dumps_canonical(obj) -> str:
    """Deterministic JSON: sorted keys, two-space indent, no NaN/Inf."""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def atomic_write_text(path: Union[str, Path], text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def write_json_atomic(path: Union[str, Path], obj) -> None:
    atomic_write_text(path, dumps_canonical(obj))


# ---------------------------------------------------------------------------
# serialization of domain values


def page_record_to_dict(p: PageRecord) -> dict:
    return {
        "page_id": p.page_id,
        "source_uri": p.source_uri,
        "original": {"width": p.original.width, "height": p.original.height},
        "transform": {"sx": p.transform.sx, "sy": p.transform.sy},
        "preprocessed_image_uri": p.preprocessed_image_uri,
    }


def page_record_from_dict(d: Mapping) -> PageRecord:
    return PageRecord(
        page_id=d["page_id"],
        source_uri=d["source_uri"],
        original=CoordSpace(ORIGINAL, width=int(d["original"]["width"]), height=int(d["original"]["height"])),
        transform=AffineMap(sx=float(d["transform"]["sx"]), sy=float(d["transform"]["sy"])),
        preprocessed_image_uri=d["preprocessed_image_uri"],
    )


def detection_id(page_id: str, index_on_page: int) -> str:
    return f"{page_id}~{index_on_page:04d}"


def detections_to_rows(detections: Sequence[Detection], pages: Sequence[PageRecord]) -> list[dict]:
    """Serialize detections sorted canonically, ids scoped per page.

    Rows carry both coordinate spaces; the preprocessed box is recomputed
    from the page transform so the original-space box stays the source of
    truth.
    """
    transforms = {p.page_id: p.transform for p in pages}
    rows = []
    per_page_counter: dict[str, int] = {}
    for d in sorted(detections, key=detection_sort_key):
        seq = per_page_counter.get(d.page_id, 0)
        per_page_counter[d.page_id] = seq + 1
        t = transforms[d.page_id]
        pre = [d.box.x0 * t.sx, d.box.y0 * t.sy, d.box.x1 * t.sx, d.box.y1 * t.sy]
        rows.append(
            {
                "id": detection_id(d.page_id, seq),
                "page_id": d.page_id,
                "class_name": d.class_name,
                "phrase": d.phrase,
                "score": d.score,
                "box": d.box.as_list(),
                "box_preprocessed": pre,
                "mask": {"size": list(d.mask.size), "counts": list(d.mask.counts)} if d.mask else None,
            }
        )
    return rows


def detection_from_row(row: Mapping, pages_by_id: Mapping[str, PageRecord]) -> Detection:
    page = pages_by_id[row["page_id"]]
    mask = None
    if row.get("mask"):
        m = row["mask"]
        mask = MaskRLE(height=int(m["size"][0]), width=int(m["size"][1]), counts=tuple(m["counts"]))
    x0, y0, x1, y1 = (float(v) for v in row["box"])
    return Detection(
        page_id=row["page_id"],
        class_name=row["class_name"],
        phrase=row["phrase"],
        score=float(row["score"]),
        box=BBox(x0, y0, x1, y1, space=page.original),
        mask=mask,
    )


# ---------------------------------------------------------------------------
# run persistence


@dataclass(frozen=True)
class RunManifest:
    run_id: str
    created_at: str
    tool_version: str
    config: dict
    pages: tuple[PageRecord, ...]


def run_lock(run_dir: Union[str, Path]) -> FileLock:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    return FileLock(str(run_dir / LOCK_NAME))


def _now_utc() -> str:
    return _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def preprocess_cfg_to_dict(cfg: PreprocessConfig) -> dict:
    return {
        "target_size": cfg.target_size,
        "cutoff_low_pct": cfg.cutoff_low_pct,
        "cutoff_high_pct": cfg.cutoff_high_pct,
    }


def merge_manifest(
    run_dir: Path,
    run_id: str,
    config_updates: Mapping,
    pages: Optional[Sequence[PageRecord]] = None,
) -> None:
    """Create or update manifest.json.

    ``created_at`` and config keys not named in ``config_updates`` survive,
    so staged commands build up one manifest and reruns stay byte-stable.
    """
    if not _RUN_ID_RE.match(run_id):
        raise ValueError(f"run id {run_id!r} must match {_RUN_ID_RE.pattern}")
    manifest_path = run_dir / MANIFEST_NAME
    created_at = _now_utc()
    config: dict = {}
    page_dicts: list = []
    if manifest_path.is_file():
        try:
            data = json.loads(manifest_path.read_text())
            created_at = data.get("created_at", created_at)
            config = dict(data.get("config", {}))
            page_dicts = list(data.get("pages", []))
        except json.JSONDecodeError:
            pass
    config.update(config_updates)
    if pages is not None:
        page_dicts = [page_record_to_dict(p) for p in sorted(pages, key=lambda p: p.page_id)]
    write_json_atomic(
        manifest_path,
        {
            "run_id": run_id,
            "created_at": created_at,
            "tool_version": TOOL_VERSION,
            "config": config,
            "pages": page_dicts,
        },
    )


def _error_dict(e: PageError) -> dict:
    return {"page_id": e.page_id, "stage": e.stage, "kind": e.kind, "message": e.message}


def _write_errors(run_dir: Path, errors: Sequence[PageError], keep_stages: Sequence[str]) -> None:
    """Write errors.json, preserving existing entries for ``keep_stages``.

    Entries for preserved stages already present in ``errors`` (a loaded
    run carries the whole log) are not duplicated.
    """
    rows = [_error_dict(e) for e in errors]
    seen = {tuple(sorted(r.items())) for r in rows}
    path = run_dir / ERRORS_NAME
    if path.is_file():
        try:
            for r in json.loads(path.read_text()):
                if r.get("stage") in keep_stages and tuple(sorted(r.items())) not in seen:
                    rows.append(r)
        except json.JSONDecodeError:
            pass
    rows.sort(key=lambda r: (r["page_id"], r["stage"], r["kind"], r["message"]))
    write_json_atomic(path, rows)


def _merge_timings(run_dir: Path, timing: Mapping[str, float]) -> None:
    path = run_dir / TIMINGS_NAME
    timings: dict = {}
    if path.is_file():
        try:
            timings = json.loads(path.read_text())
        except json.JSONDecodeError:
            timings = {}
    timings.update(timing)
    write_json_atomic(path, timings)


def persist_pages(
    root: Union[str, Path],
    run_id: str,
    pages: Sequence[PageRecord],
    errors: Sequence[PageError],
    preprocess_cfg: PreprocessConfig,
    timing: Optional[Mapping[str, float]] = None,
) -> Path:
    """Persist the preprocessing stage: page records plus any page failures."""
    run_dir = Path(root) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    with run_lock(run_dir):
        merge_manifest(run_dir, run_id, {"preprocess": preprocess_cfg_to_dict(preprocess_cfg)}, pages=pages)
        other_stages = ["read", "detect", "nms", "map", "segment"]
        _write_errors(run_dir, list(errors), keep_stages=other_stages)
        if timing:
            _merge_timings(run_dir, timing)
    return run_dir


def persist_run(
    run: PipelineRun,
    root: Union[str, Path],
    preprocess_cfg: Optional[PreprocessConfig] = None,
    extra_config: Optional[dict] = None,
) -> Path:
    """Write a run under ``<root>/<run_id>/`` and return the run directory.

    ``created_at`` is preserved from an existing manifest so re-running a
    stage never churns bytes; timings land in their own file because wall
    clocks differ per execution. Preprocess-stage errors recorded earlier
    are kept unless ``run.errors`` already carries them.
    """
    run_dir = Path(root) / run.run_id
    run_dir.mkdir(parents=True, exist_ok=True)

    config: dict = {
        "suite": suite_to_dict(run.suite),
        "backend": run.backend.to_dict(),
    }
    if preprocess_cfg is not None:
        config["preprocess"] = preprocess_cfg_to_dict(preprocess_cfg)
    if extra_config:
        config.update(extra_config)

    with run_lock(run_dir):
        merge_manifest(run_dir, run.run_id, config, pages=run.pages)
        write_json_atomic(run_dir / DETECTIONS_NAME, detections_to_rows(run.detections, run.pages))
        _write_errors(run_dir, run.errors, keep_stages=["preprocess"])
        _merge_timings(run_dir, run.timing)
    return run_dir


def load_manifest(run_dir: Union[str, Path]) -> RunManifest:
    run_dir = Path(run_dir)
    path = run_dir / MANIFEST_NAME
    if not path.is_file():
        raise IngestError(f"{run_dir} has no {MANIFEST_NAME}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise IngestError(f"corrupt manifest {path}: {exc}") from exc
    return RunManifest(
        run_id=data["run_id"],
        created_at=data["created_at"],
        tool_version=data["tool_version"],
        config=data["config"],
        pages=tuple(page_record_from_dict(p) for p in data["pages"]),
    )


def load_run(run_dir: Union[str, Path]) -> PipelineRun:
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    suite = suite_from_dict(manifest.config["suite"])
    backend = BackendDescriptor.from_dict(manifest.config["backend"])
    pages = list(manifest.pages)
    pages_by_id = {p.page_id: p for p in pages}

    detections: list[Detection] = []
    det_path = run_dir / DETECTIONS_NAME
    if det_path.is_file():
        for row in json.loads(det_path.read_text()):
            detections.append(detection_from_row(row, pages_by_id))

    errors: list[PageError] = []
    err_path = run_dir / ERRORS_NAME
    if err_path.is_file():
        for row in json.loads(err_path.read_text()):
            errors.append(PageError(**row))

    timing: dict[str, float] = {}
    t_path = run_dir / TIMINGS_NAME
    if t_path.is_file():
        timing = {k: float(v) for k, v in json.loads(t_path.read_text()).items()}

    return PipelineRun(
        run_id=manifest.run_id,
        suite=suite,
        backend=backend,
        pages=pages,
        timing=timing,
        detections=detections,
        errors=errors,
    )


def load_detection_rows(run_dir: Union[str, Path]) -> list[dict]:
    path = Path(run_dir) / DETECTIONS_NAME
    if not path.is_file():
        return []
    return json.loads(path.read_text())


# ---------------------------------------------------------------------------
# review decisions (append-only JSON lines, latest entry per detection wins)


@dataclass(frozen=True)
class ReviewDecision:
    detection_id: str
    status: str  # accepted | rejected
    reviewer: str
    timestamp: str

    def __post_init__(self):
        if self.status not in ("accepted", "rejected"):
            raise ValueError(f"status must be accepted|rejected, got {self.status!r}")


def append_decision(run_dir: Union[str, Path], decision: ReviewDecision) -> None:
    path = Path(run_dir) / DECISIONS_NAME
    line = json.dumps(
        {
            "detection_id": decision.detection_id,
            "status": decision.status,
            "reviewer": decision.reviewer,
            "timestamp": decision.timestamp,
        },
        sort_keys=True,
    )
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def load_decision_log(run_dir: Union[str, Path]) -> list[ReviewDecision]:
    path = Path(run_dir) / DECISIONS_NAME
    if not path.is_file():
        return []
    out = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        out.append(
            ReviewDecision(
                detection_id=d["detection_id"],
                status=d["status"],
                reviewer=d.get("reviewer", ""),
                timestamp=d.get("timestamp", ""),
            )
        )
    return out


def latest_decisions(run_dir: Union[str, Path]) -> dict[str, str]:
    """Current status per detection id; later log lines override earlier ones."""
    return {d.detection_id: d.status for d in load_decision_log(run_dir)}


# ---------------------------------------------------------------------------
# COCO ground truth


def load_coco(path: Union[str, Path]) -> list[GtBox]:
    """Read COCO object-detection JSON into original-space ground truth.

    Page ids are the file-name stems of the ``images`` entries; ``bbox``
    is ``[x, y, w, h]`` and converts to corner form.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestError(f"cannot read COCO file {path}: {exc}") from exc

    images: dict[int, tuple[str, CoordSpace]] = {}
    for im in data.get("images", []):
        try:
            page_id = Path(im["file_name"]).stem
            space = CoordSpace(ORIGINAL, width=int(im["width"]), height=int(im["height"]))
        except (KeyError, ValueError) as exc:
            raise IngestError(f"bad image entry {im.get('id')!r}: {exc}") from exc
        images[int(im["id"])] = (page_id, space)

    categories = {int(c["id"]): str(c["name"]) for c in data.get("categories", [])}

    gt: list[GtBox] = []
    for ann in data.get("annotations", []):
        image_id = int(ann["image_id"])
        if image_id not in images:
            raise IngestError(f"annotation {ann.get('id')!r} references unknown image_id {image_id}")
        cat_id = int(ann["category_id"])
        if cat_id not in categories:
            raise IngestError(f"annotation {ann.get('id')!r} references unknown category_id {cat_id}")
        page_id, space = images[image_id]
        x, y, w, h = (float(v) for v in ann["bbox"])
        gt.append(
            GtBox(
                page_id=page_id,
                class_name=categories[cat_id],
                box=BBox(x, y, x + w, y + h, space=space),
            )
        )
    return gt


# ---------------------------------------------------------------------------
# evaluation report files


def report_to_dict(report: EvalReport) -> dict:
    rows = []
    per_class = {}
    for c in report.per_class:
        rows.append(
            {
                "suite": report.suite_id,
                "class": c.class_name,
                "ap": c.ap,
                "n_gt": c.n_gt,
                "tp": c.tp,
                "fp": c.fp,
                "fn": c.fn,
            }
        )
        per_class[c.class_name] = {
            "ap": c.ap,
            "n_gt": c.n_gt,
            "tp": c.tp,
            "fp": c.fp,
            "fn": c.fn,
            "pr": [[p.recall, p.precision, p.score] for p in c.pr],
        }
    return {
        "config": {
            "iou_thresh": report.iou_thresh,
            "class_cast": report.class_cast,
            "suite_id": report.suite_id,
        },
        "rows": rows,
        "macro_ap": report.macro_ap,
        "per_class": per_class,
    }


def save_report(report: EvalReport, run_dir: Union[str, Path]) -> Path:
    run_dir = Path(run_dir)
    write_json_atomic(run_dir / "report.json", report_to_dict(report))
    lines = ["suite,class,score,recall,precision"]
    for c in report.per_class:
        for p in c.pr:
            lines.append(f"{report.suite_id},{c.class_name},{p.score!r},{p.recall!r},{p.precision!r}")
    atomic_write_text(run_dir / "report_pr.csv", "\n".join(lines) + "\n")
    return run_dir / "report.json"


# ---------------------------------------------------------------------------
# dataset export


@dataclass(frozen=True)
class ExportBundle:
    output_root: Path
    coco_path: Path
    n_images: int
    n_annotations: int
    n_crops: int
    n_masks: int


def _outward_pixels(box: BBox, width: int, height: int) -> tuple[int, int, int, int]:
    x0 = max(0, math.floor(box.x0))
    y0 = max(0, math.floor(box.y0))
    x1 = min(width, math.ceil(box.x1))
    y1 = min(height, math.ceil(box.y1))
    return x0, y0, x1, y1


def _mask_to_original(mask: MaskRLE, transform: AffineMap, width: int, height: int) -> np.ndarray:
    """Resample a preprocessed-space mask into original pixels, nearest neighbor."""
    grid = rle_decode(mask)
    cols = np.clip(((np.arange(width) + 0.5) * transform.sx).astype(np.int64), 0, mask.width - 1)
    rows = np.clip(((np.arange(height) + 0.5) * transform.sy).astype(np.int64), 0, mask.height - 1)
    return grid[np.ix_(rows, cols)]


def export_dataset(
    run: PipelineRun,
    review_decisions: Optional[Mapping[str, str]],
    out_root: Union[str, Path],
) -> ExportBundle:
    """Write accepted detections as a COCO dataset with crops and masks.

    A detection is excluded only when its latest review decision is
    ``rejected``; with no decisions everything exports. Crops are cut from
    the original rasters with outward-rounded boxes; masks are resampled
    to original space. Output layout: ``coco.json``, ``crops/<id>.png``,
    ``masks/<id>.png``.
    """
    out_root = Path(out_root)
    decisions = dict(review_decisions or {})
    rows = detections_to_rows(run.detections, run.pages)
    accepted = [r for r in rows if decisions.get(r["id"]) != "rejected"]

    pages_by_id = {p.page_id: p for p in run.pages}
    page_ids = sorted(pages_by_id)
    image_ids = {pid: i + 1 for i, pid in enumerate(page_ids)}
    class_names = sorted(g.class_name for g in run.suite.groups)
    category_ids = {name: i + 1 for i, name in enumerate(class_names)}

    (out_root / "crops").mkdir(parents=True, exist_ok=True)
    (out_root / "masks").mkdir(parents=True, exist_ok=True)

    rasters: dict[str, np.ndarray] = {}

    def original_raster(page: PageRecord) -> np.ndarray:
        if page.page_id not in rasters:
            try:
                rasters[page.page_id] = load_raster(page.source_uri)
            except IngestError as exc:
                raise ExportError(f"missing original image for page {page.page_id}: {exc}") from exc
        return rasters[page.page_id]

    annotations = []
    n_crops = n_masks = 0
    for i, row in enumerate(accepted):
        page = pages_by_id[row["page_id"]]
        x0, y0, x1, y1 = (float(v) for v in row["box"])
        ann: dict = {
            "id": i + 1,
            "image_id": image_ids[row["page_id"]],
            "category_id": category_ids[row["class_name"]],
            "bbox": [x0, y0, x1 - x0, y1 - y0],
            "area": (x1 - x0) * (y1 - y0),
            "iscrowd": 0,
            "score": row["score"],
            "phrase": row["phrase"],
            "detection_id": row["id"],
        }

        raster = original_raster(page)
        px0, py0, px1, py1 = _outward_pixels(
            BBox(x0, y0, x1, y1), page.original.width, page.original.height
        )
        crop = raster[py0:py1, px0:px1]
        crop_path = out_root / "crops" / f"{row['id']}.png"
        Image.fromarray(crop).save(crop_path, format="PNG")
        n_crops += 1

        if row["mask"]:
            mask = MaskRLE(
                height=int(row["mask"]["size"][0]),
                width=int(row["mask"]["size"][1]),
                counts=tuple(row["mask"]["counts"]),
            )
            original_mask = _mask_to_original(
                mask, page.transform, page.original.width, page.original.height
            )
            rle = rle_encode(original_mask)
            ann["segmentation"] = {"size": list(rle.size), "counts": list(rle.counts)}
            mask_path = out_root / "masks" / f"{row['id']}.png"
            Image.fromarray((original_mask * np.uint8(255))).save(mask_path, format="PNG")
            n_masks += 1

        annotations.append(ann)

    coco = {
        "images": [
            {
                "id": image_ids[pid],
                "file_name": Path(pages_by_id[pid].source_uri).name,
                "width": pages_by_id[pid].original.width,
                "height": pages_by_id[pid].original.height,
            }
            for pid in page_ids
        ],
        "annotations": annotations,
        "categories": [{"id": category_ids[name], "name": name} for name in class_names],
    }
    coco_path = out_root / "coco.json"
    write_json_atomic(coco_path, coco)
    return ExportBundle(
        output_root=out_root,
        coco_path=coco_path,
        n_images=len(page_ids),
        n_annotations=len(annotations),
        n_crops=n_crops,
        n_masks=n_masks,
    )
