"""Page pre-processing: fixed-size resize plus percentile autocontrast.

Every page is stretched (aspect ratio not preserved) to a square target
so detector inputs are uniform, and contrast is expanded per channel
using a discrete histogram walk with configurable tail cutoffs. The
resize transform is recorded as an invertible diagonal scale so results
can be mapped back to original coordinates.
"""

from __future__ import annotations

import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .core import ORIGINAL, PREPROCESSED, AffineMap, CoordSpace
from .errors import DimensionError, FormatError, IngestError

# modes PIL decodes with more than 8 bits per channel; rejected, not converted
_NON_8BIT_MODES = ("I", "F", "I;16", "I;16B", "I;16L", "I;16N")

_PAGE_ID_SANITIZER = re.compile(r"[^A-Za-z0-9._-]+")


@dataclass(frozen=True)
class PreprocessConfig:
    """Knobs of the pre-processing stage."""

    target_size: int = 1000
    cutoff_low_pct: float = 2.0
    cutoff_high_pct: float = 2.0

    def __post_init__(self):
        if self.target_size < 32:
            raise ValueError(f"target_size must be >= 32, got {self.target_size}")
        if not (0 <= self.cutoff_low_pct < 50) or not (0 <= self.cutoff_high_pct < 50):
            raise ValueError("percentile cutoffs must be in [0, 50)")


@dataclass(frozen=True)
class PageRecord:
    """A source page plus the invertible transform of its preprocessed copy.

    ``preprocessed_image_uri`` is stored relative to the owning run
    directory; ``source_uri`` points at the original raster.
    """

    page_id: str
    source_uri: str
    original: CoordSpace
    transform: AffineMap
    preprocessed_image_uri: str


def sanitize_page_id(name: str) -> str:
    """Collapse a filename stem into the id charset ``[A-Za-z0-9._-]``."""
    cleaned = _PAGE_ID_SANITIZER.sub("_", name).strip("_")
    if not cleaned:
        raise IngestError(f"cannot derive a page id from {name!r}")
    return cleaned


def load_raster(source_uri: Union[str, Path]) -> np.ndarray:
    """Decode a PNG/JPEG/TIFF file into an 8-bit grayscale or RGB array.

    Returns ``(H, W)`` for grayscale and ``(H, W, 3)`` for color, dtype
    uint8. Palette, alpha and CMYK images are converted to RGB; images
    with more than 8 bits per channel are rejected.
    """
    path = Path(source_uri)
    try:
        with Image.open(path) as im:
            if im.mode in _NON_8BIT_MODES:
                raise FormatError(f"{path}: {im.mode} pixels are not 8-bit")
            if im.mode == "1":
                im = im.convert("L")
            elif im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except FormatError:
        raise
    except (FileNotFoundError, UnidentifiedImageError, OSError, ValueError) as exc:
        raise IngestError(f"cannot read raster {source_uri}: {exc}") from exc
    if arr.ndim not in (2, 3) or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise IngestError(f"{source_uri}: unusable raster of shape {arr.shape}")
    return arr


def _bilinear_axis_coords(out_len: int, in_len: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel-center alignment: src = (dst + 0.5) * in/out - 0.5
    src = (np.arange(out_len, dtype=np.float64) + 0.5) * in_len / out_len - 0.5
    lo = np.floor(src)
    frac = src - lo
    lo0 = np.clip(lo, 0, in_len - 1).astype(np.int64)
    lo1 = np.clip(lo + 1, 0, in_len - 1).astype(np.int64)
    return lo0, lo1, frac


def resize(image: np.ndarray, cfg: PreprocessConfig) -> tuple[np.ndarray, AffineMap]:
    """Stretch an image to the configured square size; see :func:`resize_to`."""
    return resize_to(image, cfg.target_size)


def resize_to(image: np.ndarray, size: int) -> tuple[np.ndarray, AffineMap]:
    """Stretch an image to ``size`` x ``size`` with bilinear interpolation.

    Sampling uses half-pixel-center alignment with clamp-to-edge borders;
    interpolated values are rounded half-up before the uint8 cast. Returns
    the resized image and the scale map ``(sx, sy) = size / original``.
    """
    arr = np.asarray(image)
    if arr.ndim not in (2, 3) or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise IngestError(f"cannot resize raster of shape {arr.shape}")
    if size < 1:
        raise DimensionError(f"target size must be >= 1, got {size}")
    in_h, in_w = int(arr.shape[0]), int(arr.shape[1])

    squeeze = arr.ndim == 2
    plane = arr[:, :, None] if squeeze else arr
    plane = plane.astype(np.float64)

    x0, x1, fx = _bilinear_axis_coords(size, in_w)
    y0, y1, fy = _bilinear_axis_coords(size, in_h)
    fx = fx[None, :, None]
    fy = fy[:, None, None]

    p00 = plane[y0][:, x0]
    p01 = plane[y0][:, x1]
    p10 = plane[y1][:, x0]
    p11 = plane[y1][:, x1]
    values = (1 - fy) * ((1 - fx) * p00 + fx * p01) + fy * ((1 - fx) * p10 + fx * p11)
    out = np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)
    if squeeze:
        out = out[:, :, 0]
    return out, AffineMap(sx=size / in_w, sy=size / in_h)


def _channel_bounds(channel: np.ndarray, cutoff_low_pct: float, cutoff_high_pct: float) -> tuple[int, int]:
    hist = np.bincount(channel.ravel(), minlength=256)
    n = int(channel.size)
    cut_lo = int(np.floor(cutoff_low_pct / 100.0 * n))
    cut_hi = int(np.floor(cutoff_high_pct / 100.0 * n))
    cum = np.cumsum(hist)
    lo = int(np.argmax(cum > cut_lo))
    cum_rev = np.cumsum(hist[::-1])
    hi = 255 - int(np.argmax(cum_rev > cut_hi))
    return lo, hi


def autocontrast(image: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    """Expand contrast per channel from histogram percentile bounds.

    For each channel, ``lo`` is the smallest intensity whose cumulative
    histogram count exceeds ``floor(cutoff_low_pct/100 * n)`` and ``hi``
    the largest whose top-down count exceeds the high cutoff. Channels
    with ``hi <= lo`` pass through unchanged; otherwise values map as
    ``clamp(round_half_up((v - lo) * 255 / (hi - lo)), 0, 255)``.
    """
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise FormatError(f"autocontrast expects uint8 channels, got {arr.dtype}")
    if arr.ndim == 2:
        planes = arr[:, :, None]
    elif arr.ndim == 3:
        planes = arr
    else:
        raise FormatError(f"autocontrast expects a 2-D or 3-D raster, got shape {arr.shape}")

    out = np.empty_like(planes)
    levels = np.arange(256, dtype=np.float64)
    for c in range(planes.shape[2]):
        channel = planes[:, :, c]
        lo, hi = _channel_bounds(channel, cfg.cutoff_low_pct, cfg.cutoff_high_pct)
        if hi <= lo:
            out[:, :, c] = channel
            continue
        lut = np.clip(np.floor((levels - lo) * 255.0 / (hi - lo) + 0.5), 0, 255).astype(np.uint8)
        out[:, :, c] = lut[channel]
    return out[:, :, 0] if arr.ndim == 2 else out


def save_png_atomic(image: np.ndarray, path: Union[str, Path]) -> None:
    """Write an image as PNG via a temp file + rename so readers never see partials."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".png")
    try:
        with os.fdopen(fd, "wb") as fh:
            Image.fromarray(image).save(fh, format="PNG")
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def preprocess_page(
    source_uri: Union[str, Path],
    cfg: PreprocessConfig,
    run_dir: Union[str, Path],
    page_id: str | None = None,
) -> PageRecord:
    """Resize then autocontrast one page and persist the result.

    The preprocessed PNG lands in ``<run_dir>/preprocessed/<page_id>.png``.
    Deterministic: identical input bytes and config produce identical output
    bytes.
    """
    run_dir = Path(run_dir)
    source_path = Path(source_uri)
    pid = page_id if page_id is not None else sanitize_page_id(source_path.stem)

    raster = load_raster(source_path)
    in_h, in_w = raster.shape[0], raster.shape[1]
    resized, transform = resize(raster, cfg)
    final = autocontrast(resized, cfg)

    rel_uri = f"preprocessed/{pid}.png"
    save_png_atomic(final, run_dir / rel_uri)
    return PageRecord(
        page_id=pid,
        source_uri=str(source_path.resolve()),
        original=CoordSpace(ORIGINAL, width=in_w, height=in_h),
        transform=transform,
        preprocessed_image_uri=rel_uri,
    )


def preprocessed_space(cfg: PreprocessConfig) -> CoordSpace:
    return CoordSpace(PREPROCESSED, width=cfg.target_size, height=cfg.target_size)


def resolve_uri(run_dir: Union[str, Path], uri: str) -> Path:
    """Resolve a possibly run-relative URI against its run directory."""
    p = Path(uri)
    return p if p.is_absolute() else Path(run_dir) / p
