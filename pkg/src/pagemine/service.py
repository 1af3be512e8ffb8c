"""Review HTTP service: browse runs, view overlays, record decisions, export.

Every GET is served from the run directories on disk, so a restarted
process resumes exactly where the previous one stopped. Writes (decisions,
session runs, exports) are serialized per run with an in-process lock plus
the run directory's file lock.

Detection ids on the wire are ``{run_id}~{local_id}`` where ``local_id``
is the page-scoped id stored in detections.json; run ids never contain
``~`` so the composite splits unambiguously.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import io
import json
import logging
import shutil
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from fastapi import Body, FastAPI, HTTPException, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from PIL import Image

from .backend import BackendDescriptor, make_backend
from .dataset_io import (
    ReviewDecision,
    append_decision,
    export_dataset,
    latest_decisions,
    load_detection_rows,
    load_manifest,
    load_run,
    persist_run,
    run_lock,
)
from .errors import ExportError, IngestError, PageMineError
from .pipeline import PipelineConfig, run_pipeline
from .preprocess import PageRecord, load_raster, resolve_uri
from .prompts import builtin_suites, suite_from_dict

log = logging.getLogger("pagemine.service")


@dataclass(frozen=True)
class ServiceSettings:
    runs_root: Path
    backend: Optional[BackendDescriptor] = None
    token: Optional[str] = None
    cors_origins: tuple[str, ...] = ("*",)
    session_page_limit: int = 16
    session_segment: bool = True


@dataclass
class _PageRef:
    run_dir: Path
    record: PageRecord
    target_size: int
    preprocess_cfg: dict = field(default_factory=dict)


def _utc_now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _split_detection_id(composite: str) -> tuple[str, str]:
    if "~" not in composite:
        raise HTTPException(status_code=404, detail=f"unknown detection id {composite!r}")
    run_id, local_id = composite.split("~", 1)
    return run_id, local_id


def create_app(settings: ServiceSettings) -> FastAPI:
    app = FastAPI(title="pagemine review service", version="1")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=list(settings.cors_origins),
        allow_methods=["*"],
        allow_headers=["*"],
    )
    runs_root = Path(settings.runs_root)
    runs_root.mkdir(parents=True, exist_ok=True)

    write_locks: dict[str, threading.Lock] = {}
    write_locks_guard = threading.Lock()

    def write_lock(run_id: str) -> threading.Lock:
        with write_locks_guard:
            return write_locks.setdefault(run_id, threading.Lock())

    # ---- disk readers (no caching: restart safety for free) ----

    def run_dirs() -> list[Path]:
        return sorted(
            (p for p in runs_root.iterdir() if (p / "manifest.json").is_file()),
            key=lambda p: p.name,
        )

    def require_run(run_id: str) -> Path:
        run_dir = runs_root / run_id
        if "/" in run_id or not (run_dir / "manifest.json").is_file():
            raise HTTPException(status_code=404, detail=f"unknown run {run_id!r}")
        return run_dir

    def page_index() -> dict[str, _PageRef]:
        """page_id -> where to find it; later runs win on collisions."""
        index: dict[str, _PageRef] = {}
        for run_dir in run_dirs():
            try:
                manifest = load_manifest(run_dir)
            except IngestError:
                continue
            pre_cfg = manifest.config.get("preprocess", {})
            size = int(pre_cfg.get("target_size", 1000))
            for page in manifest.pages:
                index[page.page_id] = _PageRef(run_dir, page, size, dict(pre_cfg))
        return index

    def run_summary(run_dir: Path) -> dict:
        manifest = load_manifest(run_dir)
        rows = load_detection_rows(run_dir)
        decisions = latest_decisions(run_dir)
        config = manifest.config
        return {
            "run_id": manifest.run_id,
            "created_at": manifest.created_at,
            "tool_version": manifest.tool_version,
            "suite_id": config.get("suite", {}).get("suite_id"),
            "session": config.get("session"),
            "n_pages": len(manifest.pages),
            "n_detections": len(rows),
            "n_accepted": sum(1 for s in decisions.values() if s == "accepted"),
            "n_rejected": sum(1 for s in decisions.values() if s == "rejected"),
        }

    # ---- auth ----

    @app.middleware("http")
    async def check_token(request: Request, call_next):
        if settings.token and request.url.path.startswith("/api"):
            expected = f"Bearer {settings.token}"
            if request.headers.get("authorization") != expected:
                return Response(
                    content=json.dumps({"detail": "missing or wrong bearer token"}),
                    status_code=401,
                    media_type="application/json",
                )
        return await call_next(request)

    # ---- read endpoints ----

    @app.get("/api/health")
    def health() -> dict:
        return {"status": "ok", "runs_root": str(runs_root)}

    @app.get("/api/runs")
    def list_runs() -> dict:
        return {"runs": [run_summary(d) for d in run_dirs()]}

    @app.get("/api/runs/{run_id}")
    def get_run(run_id: str) -> dict:
        run_dir = require_run(run_id)
        manifest = load_manifest(run_dir)
        errors_path = run_dir / "errors.json"
        timings_path = run_dir / "timings.json"
        return {
            **run_summary(run_dir),
            "config": manifest.config,
            "pages": [
                {
                    "page_id": p.page_id,
                    "original": {"width": p.original.width, "height": p.original.height},
                    "transform": {"sx": p.transform.sx, "sy": p.transform.sy},
                }
                for p in manifest.pages
            ],
            "errors": json.loads(errors_path.read_text()) if errors_path.is_file() else [],
            "timings": json.loads(timings_path.read_text()) if timings_path.is_file() else {},
        }

    @app.get("/api/runs/{run_id}/detections")
    def get_detections(run_id: str, page: Optional[str] = None, offset: int = 0, limit: int = 500) -> dict:
        run_dir = require_run(run_id)
        if offset < 0 or limit < 1:
            raise HTTPException(status_code=422, detail="offset must be >= 0 and limit >= 1")
        rows = load_detection_rows(run_dir)
        if page is not None:
            rows = [r for r in rows if r["page_id"] == page]
        total = len(rows)
        rows = rows[offset : offset + min(limit, 2000)]
        decisions = latest_decisions(run_dir)
        out = []
        for r in rows:
            local_id = r["id"]
            out.append(
                {
                    **r,
                    "id": f"{run_id}~{local_id}",
                    "local_id": local_id,
                    "decision": decisions.get(local_id),
                }
            )
        return {"total": total, "offset": offset, "detections": out}

    @app.get("/api/pages/{page_id}/image")
    def get_page_image(page_id: str, request: Request, space: str = "original") -> Response:
        if space not in ("original", "preprocessed"):
            raise HTTPException(status_code=422, detail="space must be original or preprocessed")
        ref = page_index().get(page_id)
        if ref is None:
            raise HTTPException(status_code=404, detail=f"unknown page {page_id!r}")
        if space == "preprocessed":
            path = resolve_uri(ref.run_dir, ref.record.preprocessed_image_uri)
        else:
            path = Path(ref.record.source_uri)
        if not path.is_file():
            raise HTTPException(status_code=404, detail=f"image file for page {page_id!r} is missing")

        stat = path.stat()
        etag = hashlib.sha1(f"{path}:{stat.st_mtime_ns}:{stat.st_size}".encode()).hexdigest()[:20]
        headers = {"Cache-Control": "private, max-age=3600", "ETag": etag}
        if request.headers.get("if-none-match") == etag:
            return Response(status_code=304, headers=headers)

        if path.suffix.lower() == ".png":
            payload = path.read_bytes()
        else:
            try:
                raster = load_raster(path)
            except PageMineError as exc:
                raise HTTPException(status_code=500, detail=str(exc)) from exc
            buf = io.BytesIO()
            Image.fromarray(raster).save(buf, format="PNG")
            payload = buf.getvalue()
        return Response(content=payload, media_type="image/png", headers=headers)

    # ---- write endpoints ----

    @app.post("/api/sessions")
    def create_session(payload: dict = Body(...)) -> dict:
        page_ids = payload.get("page_ids")
        if not isinstance(page_ids, list) or not page_ids or not all(isinstance(p, str) for p in page_ids):
            raise HTTPException(status_code=400, detail="page_ids must be a non-empty list of strings")
        if len(page_ids) > settings.session_page_limit:
            raise HTTPException(
                status_code=422,
                detail=f"sessions are limited to {settings.session_page_limit} pages, got {len(page_ids)}",
            )

        suite_spec = payload.get("suite")
        try:
            if isinstance(suite_spec, str):
                suite = builtin_suites()[suite_spec]
            elif isinstance(suite_spec, dict):
                suite = suite_from_dict(suite_spec)
            else:
                raise IngestError("suite must be a builtin id or a suite object")
        except (KeyError, IngestError, PageMineError) as exc:
            raise HTTPException(status_code=400, detail=f"malformed suite: {exc}") from exc

        index = page_index()
        missing = [p for p in page_ids if p not in index]
        if missing:
            raise HTTPException(status_code=404, detail=f"unknown page(s): {', '.join(sorted(missing))}")
        refs = [index[p] for p in page_ids]
        sizes = {ref.target_size for ref in refs}
        if len(sizes) > 1:
            raise HTTPException(status_code=422, detail="selected pages mix preprocess sizes")
        target_size = sizes.pop()

        if settings.backend is None:
            raise HTTPException(status_code=503, detail={"error": "no backend configured"})
        backend = make_backend(settings.backend)
        try:
            health_payload = backend.health()
        except PageMineError as exc:
            raise HTTPException(
                status_code=503,
                detail={"error": f"backend unhealthy: {exc}", "health": {"status": "unreachable"}},
            ) from exc

        session_id = uuid.uuid4().hex[:12]
        run_id = f"session-{session_id}"
        run_dir = runs_root / run_id
        with write_lock(run_id):
            (run_dir / "preprocessed").mkdir(parents=True, exist_ok=True)
            pages = []
            for ref in refs:
                src = resolve_uri(ref.run_dir, ref.record.preprocessed_image_uri)
                dst_uri = f"preprocessed/{ref.record.page_id}.png"
                shutil.copyfile(src, run_dir / dst_uri)
                pages.append(
                    PageRecord(
                        page_id=ref.record.page_id,
                        source_uri=ref.record.source_uri,
                        original=ref.record.original,
                        transform=ref.record.transform,
                        preprocessed_image_uri=dst_uri,
                    )
                )

            segment = bool(payload.get("segment", settings.session_segment))
            cfg = PipelineConfig(segment=segment, target_size=target_size)
            run = run_pipeline(
                pages=pages,
                suite=suite,
                backend=backend,
                cfg=cfg,
                run_id=run_id,
                run_dir=run_dir,
                backend_desc=settings.backend,
            )
            persist_run(
                run,
                runs_root,
                extra_config={
                    "preprocess": refs[0].preprocess_cfg,
                    "session": {
                        "session_id": session_id,
                        "created_at": _utc_now(),
                        "parent_run": {ref.record.page_id: ref.run_dir.name for ref in refs},
                    },
                },
            )
        return {
            "session_id": session_id,
            "run_id": run_id,
            "n_detections": len(run.detections),
            "n_errors": len(run.errors),
            "backend_health": health_payload,
        }

    @app.post("/api/detections/{composite_id}/decision")
    def post_decision(composite_id: str, payload: dict = Body(...)) -> dict:
        status = payload.get("status")
        if status not in ("accepted", "rejected"):
            raise HTTPException(status_code=400, detail="status must be accepted or rejected")
        reviewer = payload.get("reviewer", "")
        if not isinstance(reviewer, str):
            raise HTTPException(status_code=400, detail="reviewer must be a string")

        run_id, local_id = _split_detection_id(composite_id)
        run_dir = require_run(run_id)
        known = {r["id"] for r in load_detection_rows(run_dir)}
        if local_id not in known:
            raise HTTPException(status_code=404, detail=f"unknown detection id {composite_id!r}")

        decision = ReviewDecision(
            detection_id=local_id,
            status=status,
            reviewer=reviewer,
            timestamp=_utc_now(),
        )
        with write_lock(run_id), run_lock(run_dir):
            append_decision(run_dir, decision)
        return {
            "detection_id": composite_id,
            "status": status,
            "reviewer": reviewer,
            "timestamp": decision.timestamp,
        }

    @app.post("/api/runs/{run_id}/export")
    def post_export(run_id: str, payload: Optional[dict] = Body(default=None)) -> dict:
        run_dir = require_run(run_id)
        out_dir = Path(payload["out_dir"]) if payload and payload.get("out_dir") else run_dir / "export"
        with write_lock(run_id):
            run = load_run(run_dir)
            try:
                bundle = export_dataset(run, latest_decisions(run_dir), out_dir)
            except ExportError as exc:
                raise HTTPException(status_code=500, detail=str(exc)) from exc
        return {
            "output_root": str(bundle.output_root),
            "coco": str(bundle.coco_path),
            "images": bundle.n_images,
            "annotations": bundle.n_annotations,
            "crops": bundle.n_crops,
            "masks": bundle.n_masks,
        }

    return app
