"""Command line entry point: load both models, then serve."""

import argparse
import logging
import sys
from typing import Optional, Sequence

import uvicorn

from .app import create_app
from .config import SidecarConfig
from .models import StubDetector, StubSegmenter, TransformersDetector, TransformersSegmenter

log = logging.getLogger("pagemine_sidecar")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pagemine-sidecar",
        description="Serve text-prompted detection and box-prompted segmentation over HTTP.",
    )
    parser.add_argument("--detector", help="detector checkpoint id or path")
    parser.add_argument("--segmenter", help="segmenter checkpoint id or path")
    parser.add_argument("--device", help="torch device, e.g. cpu or cuda")
    parser.add_argument("--host")
    parser.add_argument("--port", type=int)
    parser.add_argument(
        "--stub",
        action="store_true",
        help="serve deterministic stub models instead of real checkpoints",
    )
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    base = SidecarConfig.from_env()
    cfg = SidecarConfig(
        detector=args.detector or base.detector,
        segmenter=args.segmenter or base.segmenter,
        device=args.device or base.device,
        host=args.host or base.host,
        port=args.port if args.port is not None else base.port,
    )
    if args.stub:
        detector, segmenter = StubDetector(), StubSegmenter()
    else:
        detector = TransformersDetector(cfg.detector, device=cfg.device)
        segmenter = TransformersSegmenter(cfg.segmenter, device=cfg.device)
    # Both models must be usable before the port opens.
    try:
        detector.load()
        segmenter.load()
    except Exception as exc:
        log.error("model load failed: %s", exc)
        return 1
    log.info(
        "serving detector=%s segmenter=%s device=%s on %s:%d",
        detector.identifier, segmenter.identifier, cfg.device, cfg.host, cfg.port,
    )
    uvicorn.run(create_app(detector, segmenter, device=cfg.device), host=cfg.host, port=cfg.port)
    return 0


def entrypoint() -> None:
    sys.exit(main())
