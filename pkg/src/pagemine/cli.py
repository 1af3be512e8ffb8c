"""Operator command line: preprocess, detect, segment, eval, export, serve.

Each stage command is idempotent on unchanged inputs (reruns rewrite the
same bytes). ``pipeline`` chains preprocess, detect and segment in one
process. Exit codes: 0 success, 2 partial data failure, 3 backend or
protocol failure, 64 usage error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import jsonschema

from . import __version__
from .backend import BackendDescriptor, make_backend
from .dataset_io import (
    export_dataset,
    latest_decisions,
    load_coco,
    load_manifest,
    load_run,
    persist_pages,
    persist_run,
    save_report,
)
from .errors import BackendError, IngestError, PageMineError, ProtocolError, UsageError
from .evaluation import EvalConfig, evaluate
from .pipeline import PageError, PipelineConfig, run_pipeline, segment_page
from .preprocess import PreprocessConfig, preprocess_page, sanitize_page_id
from .prompts import PromptSuite, builtin_suites, load_suite, suite_from_dict

EXIT_OK = 0
EXIT_PARTIAL = 2
EXIT_BACKEND = 3
EXIT_USAGE = 64

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp", ".gif"}

BACKEND_FAILURE_KINDS = {"BackendError", "ProtocolError", "FixtureNotFoundError"}

log = logging.getLogger("pagemine.cli")


class _JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "time": _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ"),
            "level": record.levelname.lower(),
            "logger": record.name,
            "message": record.getMessage(),
        }
        if record.exc_info:
            payload["exc"] = self.formatException(record.exc_info)
        return json.dumps(payload, sort_keys=True)


def configure_logging(json_lines: bool, verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    if json_lines:
        handler.setFormatter(_JsonLineFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("pagemine")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


class _Parser(argparse.ArgumentParser):
    """argparse that exits with the usage code instead of 2."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config file


def _config_schema() -> dict:
    from importlib.resources import files

    text = files("pagemine").joinpath("schemas/config.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def load_config(path: Optional[str]) -> dict:
    """Read and schema-validate a config file; unknown keys are rejected."""
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    try:
        jsonschema.validate(data, _config_schema())
    except jsonschema.ValidationError as exc:
        raise UsageError(f"invalid config file {path}: {exc.message}") from exc
    return data


def preprocess_config_from(config: dict) -> PreprocessConfig:
    section = config.get("preprocess", {})
    return PreprocessConfig(
        target_size=int(section.get("target_size", 1000)),
        cutoff_low_pct=float(section.get("cutoff_low_pct", 2.0)),
        cutoff_high_pct=float(section.get("cutoff_high_pct", 2.0)),
    )


def resolve_suite(ref: Optional[str], config: dict) -> PromptSuite:
    if ref is None:
        inline = config.get("suite")
        if inline is None:
            raise UsageError("no prompt suite given (flag --suite or config key 'suite')")
        if isinstance(inline, str):
            ref = inline
        else:
            return suite_from_dict(inline)
    try:
        return load_suite(ref)
    except (IngestError, PageMineError) as exc:
        known = ", ".join(sorted(builtin_suites()))
        raise UsageError(f"{exc} (builtin suites: {known})") from exc


def resolve_backend(args, config: dict, manifest_config: Optional[dict] = None) -> BackendDescriptor:
    """Backend from flags, else the config file, else the run manifest."""
    kind = getattr(args, "backend", None)
    if kind:
        try:
            return BackendDescriptor(
                kind=kind,
                endpoint=getattr(args, "endpoint", None),
                fixture_root=getattr(args, "fixture_root", None),
                timeout=getattr(args, "timeout", 30.0),
                max_in_flight=getattr(args, "max_in_flight", 4),
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    for source in (config, manifest_config or {}):
        if "backend" in source:
            try:
                return BackendDescriptor.from_dict(source["backend"])
            except (KeyError, ValueError) as exc:
                raise UsageError(f"bad backend descriptor: {exc}") from exc
    raise UsageError("no backend given (flag --backend or config key 'backend')")


def _load_manifest_or_usage(run_dir: Path):
    if not (run_dir / "manifest.json").is_file():
        raise UsageError(f"{run_dir} is not a run directory (no manifest.json); run preprocess first")
    return load_manifest(run_dir)


def _exit_code_for_errors(errors: Sequence[PageError]) -> int:
    if any(e.kind in BACKEND_FAILURE_KINDS for e in errors):
        return EXIT_BACKEND
    if errors:
        return EXIT_PARTIAL
    return EXIT_OK


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(args) -> int:
    config = load_config(args.config)
    cfg = preprocess_config_from(config)
    run_dir = Path(args.out)
    run_id = run_dir.name
    images_dir = Path(args.images)
    if not images_dir.is_dir():
        raise UsageError(f"--images {images_dir} is not a directory")

    sources = sorted(p for p in images_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    pages, errors = [], []
    t0 = time.perf_counter()
    for src in sources:
        try:
            pages.append(preprocess_page(src, cfg, run_dir))
        except PageMineError as exc:
            page_id = sanitize_page_id(src.stem)
            log.warning("page %s failed during preprocess: %s", page_id, exc)
            errors.append(
                PageError(page_id=page_id, stage="preprocess", kind=type(exc).__name__, message=str(exc))
            )
    timing = {"preprocess": time.perf_counter() - t0}

    persist_pages(run_dir.parent, run_id, pages, errors, cfg, timing)
    log.info("preprocessed %d page(s), %d failure(s) -> %s", len(pages), len(errors), run_dir)
    return EXIT_PARTIAL if errors else EXIT_OK


def _check_backend_health(backend) -> None:
    try:
        backend.health()
    except PageMineError as exc:
        raise BackendError(f"backend health check failed: {exc}") from exc


def cmd_detect(args) -> int:
    config = load_config(args.config)
    run_dir = Path(args.run)
    manifest = _load_manifest_or_usage(run_dir)
    suite = resolve_suite(args.suite, config)
    desc = resolve_backend(args, config, manifest.config)
    backend = make_backend(desc)
    _check_backend_health(backend)

    nms_cfg = config.get("nms", {})
    pipeline_cfg = PipelineConfig(
        class_agnostic_nms=(
            not args.per_class_nms if args.per_class_nms is not None else nms_cfg.get("class_agnostic", True)
        ),
        nms_iou=args.nms_iou if args.nms_iou is not None else nms_cfg.get("iou_thresh"),
        segment=False,
        target_size=int(manifest.config.get("preprocess", {}).get("target_size", 1000)),
    )
    run = run_pipeline(
        pages=list(manifest.pages),
        suite=suite,
        backend=backend,
        cfg=pipeline_cfg,
        run_id=manifest.run_id,
        run_dir=run_dir,
        backend_desc=desc,
    )
    persist_run(run, run_dir.parent, extra_config={"nms": {
        "iou_thresh": pipeline_cfg.nms_iou if pipeline_cfg.nms_iou is not None else suite.nms_iou,
        "class_agnostic": pipeline_cfg.class_agnostic_nms,
    }})
    log.info("detected %d box(es) on %d page(s), %d failure(s)", len(run.detections), len(run.pages), len(run.errors))
    return _exit_code_for_errors(run.errors)


def cmd_segment(args) -> int:
    run_dir = Path(args.run)
    _load_manifest_or_usage(run_dir)
    run = load_run(run_dir)
    if not run.detections:
        log.info("no detections to segment in %s", run_dir)
        return EXIT_OK
    desc = resolve_backend(args, load_config(args.config), {"backend": run.backend.to_dict()})
    backend = make_backend(desc)
    _check_backend_health(backend)

    pages_by_id = {p.page_id: p for p in run.pages}
    by_page: dict[str, list] = {}
    for d in run.detections:
        by_page.setdefault(d.page_id, []).append(d)

    out, errors = [], list(run.errors)
    t0 = time.perf_counter()
    for page_id in sorted(by_page):
        page = pages_by_id[page_id]
        try:
            out.extend(segment_page(page, by_page[page_id], backend, run_dir))
        except PageMineError as exc:
            log.warning("page %s failed during segment: %s", page_id, exc)
            errors.append(
                PageError(page_id=page_id, stage="segment", kind=type(exc).__name__, message=str(exc))
            )
            out.extend(by_page[page_id])  # keep boxes without masks

    new_errors = [e for e in errors if e.stage == "segment"]
    run.detections = out
    run.errors = errors
    run.timing = {"segment": time.perf_counter() - t0}
    persist_run(run, run_dir.parent)
    n_masked = sum(1 for d in out if d.mask is not None)
    log.info("attached %d mask(s) to %d detection(s)", n_masked, len(out))
    return _exit_code_for_errors(new_errors)


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    _load_manifest_or_usage(run_dir)
    run = load_run(run_dir)
    gt = load_coco(args.gt)

    class_cast = None
    if args.cast:
        try:
            class_cast = json.loads(Path(args.cast).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read cast file {args.cast}: {exc}") from exc
        if not isinstance(class_cast, dict):
            raise UsageError(f"cast file {args.cast} must hold a flat class-name mapping")

    try:
        cfg = EvalConfig(iou_thresh=args.iou, class_cast=class_cast, strict_cast=False)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    report = evaluate(run, gt, cfg)
    save_report(report, run_dir)

    print(f"{'suite':<24} {'class':<24} {'n_gt':>5} {'tp':>4} {'fp':>4} {'fn':>4} {'ap':>8}")
    for c in report.per_class:
        ap = "   n/a" if c.ap is None else f"{c.ap:8.4f}"
        print(f"{report.suite_id:<24} {c.class_name:<24} {c.n_gt:>5} {c.tp:>4} {c.fp:>4} {c.fn:>4} {ap:>8}")
    macro = "n/a" if report.macro_ap is None else f"{report.macro_ap:.4f}"
    print(f"macro AP ({report.suite_id}): {macro}")
    return EXIT_OK


def cmd_export(args) -> int:
    run_dir = Path(args.run)
    _load_manifest_or_usage(run_dir)
    run = load_run(run_dir)
    if args.decisions:
        decisions_dir = Path(args.decisions).parent
        name = Path(args.decisions).name
        if name != "decisions.jsonl":
            raise UsageError("--decisions must point to a decisions.jsonl file")
        decisions = latest_decisions(decisions_dir)
    else:
        decisions = latest_decisions(run_dir)
    out_root = Path(args.out) if args.out else run_dir / "export"
    bundle = export_dataset(run, decisions, out_root)
    print(
        json.dumps(
            {
                "output_root": str(bundle.output_root),
                "coco": str(bundle.coco_path),
                "images": bundle.n_images,
                "annotations": bundle.n_annotations,
                "crops": bundle.n_crops,
                "masks": bundle.n_masks,
            },
            sort_keys=True,
            indent=2,
        )
    )
    return EXIT_OK


def cmd_pipeline(args) -> int:
    status = cmd_preprocess(args)
    if status not in (EXIT_OK, EXIT_PARTIAL):
        return status

    config = load_config(args.config)
    run_dir = Path(args.out)
    manifest = _load_manifest_or_usage(run_dir)
    suite = resolve_suite(args.suite, config)
    desc = resolve_backend(args, config, manifest.config)
    backend = make_backend(desc)
    _check_backend_health(backend)

    nms_cfg = config.get("nms", {})
    segment = args.segment if args.segment is not None else config.get("segment", True)
    pipeline_cfg = PipelineConfig(
        class_agnostic_nms=(
            not args.per_class_nms if args.per_class_nms is not None else nms_cfg.get("class_agnostic", True)
        ),
        nms_iou=args.nms_iou if args.nms_iou is not None else nms_cfg.get("iou_thresh"),
        segment=segment,
        target_size=int(manifest.config.get("preprocess", {}).get("target_size", 1000)),
    )
    run = run_pipeline(
        pages=list(manifest.pages),
        suite=suite,
        backend=backend,
        cfg=pipeline_cfg,
        run_id=manifest.run_id,
        run_dir=run_dir,
        backend_desc=desc,
    )
    persist_run(run, run_dir.parent, extra_config={"nms": {
        "iou_thresh": pipeline_cfg.nms_iou if pipeline_cfg.nms_iou is not None else suite.nms_iou,
        "class_agnostic": pipeline_cfg.class_agnostic_nms,
    }})
    log.info("pipeline: %d detection(s), %d failure(s)", len(run.detections), len(run.errors))
    return max(status, _exit_code_for_errors(run.errors))


def cmd_serve(args) -> int:
    import uvicorn

    from .service import ServiceSettings, create_app

    config = load_config(args.config)
    desc = None
    if getattr(args, "backend", None) or "backend" in config:
        desc = resolve_backend(args, config)
    settings = ServiceSettings(
        runs_root=Path(args.runs),
        backend=desc,
        token=args.token,
        cors_origins=tuple(args.cors_origin or ["*"]),
        session_page_limit=args.session_page_limit,
    )
    app = create_app(settings)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser wiring


def _add_backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=["remote", "fixture"], help="backend kind")
    p.add_argument("--endpoint", help="remote backend base URL")
    p.add_argument("--fixture-root", help="fixture backend directory")
    p.add_argument("--timeout", type=float, default=30.0, help="HTTP timeout seconds")
    p.add_argument("--max-in-flight", type=int, default=4, help="concurrent backend requests")


def _add_detect_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--suite", help="builtin suite id or suite JSON file")
    p.add_argument("--nms-iou", type=float, default=None, help="NMS IoU threshold override")
    p.add_argument(
        "--per-class-nms",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="suppress only within a class (default: across classes)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pagemine", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--json", dest="json_logs", action="store_true", help="JSON-line logs on stderr")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", help="resize and autocontrast page images into a run directory")
    p.add_argument("--images", required=True, help="directory of page images")
    p.add_argument("--out", required=True, help="run directory to create (its name is the run id)")
    p.add_argument("--config", help="config JSON file")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("detect", help="run prompt-driven detection over a preprocessed run")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--config", help="config JSON file")
    _add_detect_flags(p)
    _add_backend_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("segment", help="attach one mask per persisted detection")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--config", help="config JSON file")
    _add_backend_flags(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="score a run against COCO ground truth")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--gt", required=True, help="COCO ground-truth JSON")
    p.add_argument("--iou", type=float, default=0.5, help="matching IoU threshold")
    p.add_argument("--cast", help="JSON file mapping class names before matching")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="export accepted detections as a COCO dataset")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--decisions", help="decisions.jsonl path (default: the run's)")
    p.add_argument("--out", help="output directory (default: <run>/export)")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("pipeline", help="preprocess, detect and segment in one go")
    p.add_argument("--images", required=True, help="directory of page images")
    p.add_argument("--out", required=True, help="run directory to create")
    p.add_argument("--config", help="config JSON file")
    p.add_argument(
        "--segment",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="request masks after detection (default: on)",
    )
    _add_detect_flags(p)
    _add_backend_flags(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("serve", help="start the review HTTP service")
    p.add_argument("--runs", required=True, help="directory containing run directories")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--config", help="config JSON file")
    p.add_argument("--token", help="require this bearer token on every request")
    p.add_argument("--cors-origin", action="append", help="allowed CORS origin (repeatable)")
    p.add_argument("--session-page-limit", type=int, default=16)
    _add_backend_flags(p)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.json_logs, args.verbose)
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (BackendError, ProtocolError) as exc:
        log.error("%s", exc)
        return EXIT_BACKEND
    except PageMineError as exc:
        log.error("%s", exc)
        return EXIT_PARTIAL
    except KeyboardInterrupt:
        log.error("interrupted")
        return 130


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
