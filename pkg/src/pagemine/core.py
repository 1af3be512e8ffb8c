"""Shared domain types and exact geometric primitives.

Boxes are corner-format ``(x0, y0, x1, y1)`` in continuous pixel
coordinates. Masks are stored as COCO-style uncompressed RLE:
column-major run lengths, first run counting background pixels.
All types here are immutable values and all functions are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from .errors import CoordSpaceError, DimensionError, MalformedRLEError

ORIGINAL = "original"
PREPROCESSED = "preprocessed"

MapDirection = Literal["to_original", "to_preprocessed"]


@dataclass(frozen=True)
class CoordSpace:
    """A named pixel coordinate system with integer extent."""

    tag: str
    width: int
    height: int

    def __post_init__(self):
        if self.tag not in (ORIGINAL, PREPROCESSED):
            raise ValueError(f"unknown coordinate space tag {self.tag!r}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"coordinate space must be at least 1x1, got {self.width}x{self.height}")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box ``x0 < x1``, ``y0 < y1`` with strictly positive area.

    ``space`` declares which coordinate system the corners live in;
    ``None`` means unspecified, in which case space checks are skipped.
    """

    x0: float
    y0: float
    x1: float
    y1: float
    space: Optional[CoordSpace] = None

    def __post_init__(self):
        for v in (self.x0, self.y0, self.x1, self.y1):
            if not math.isfinite(v):
                raise ValueError(f"box coordinates must be finite, got {self.as_list()}")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {self.as_list()}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list[float]:
        return [float(self.x0), float(self.y0), float(self.x1), float(self.y1)]


@dataclass(frozen=True)
class AffineMap:
    """Diagonal scale taking original coordinates into preprocessed ones.

    ``x_pre = x_orig * sx`` and ``y_pre = y_orig * sy``.
    """

    sx: float
    sy: float

    def __post_init__(self):
        if not (math.isfinite(self.sx) and math.isfinite(self.sy)):
            raise ValueError("scale factors must be finite")
        if self.sx <= 0 or self.sy <= 0:
            raise ValueError(f"scale factors must be positive, got ({self.sx}, {self.sy})")


@dataclass(frozen=True)
class MaskRLE:
    """Uncompressed RLE bitmask, column-major, background run first.

    ``counts`` alternates background/foreground run lengths starting with
    background; a leading zero marks a mask whose first pixel is foreground.
    """

    height: int
    width: int
    counts: tuple[int, ...]

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise MalformedRLEError(f"mask must be at least 1x1, got {self.height}x{self.width}")
        counts = tuple(int(c) for c in self.counts)
        object.__setattr__(self, "counts", counts)
        if not counts:
            raise MalformedRLEError("empty run list")
        if any(c < 0 for c in counts):
            raise MalformedRLEError(f"negative run length in {counts[:8]}...")
        if any(c == 0 for c in counts[1:]):
            raise MalformedRLEError("zero-length run after the first")
        total = sum(counts)
        if total != self.height * self.width:
            raise MalformedRLEError(
                f"run lengths sum to {total}, expected {self.height}x{self.width}={self.height * self.width}"
            )

    @property
    def size(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass(frozen=True)
class Detection:
    """One scored, classed, phrase-attributed box on a page."""

    page_id: str
    class_name: str
    phrase: str
    score: float
    box: BBox
    mask: Optional[MaskRLE] = None

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes in the same coordinate space.

    Symmetric, bounded to ``[0, 1]``, zero for disjoint boxes and exactly
    one only for identical boxes.
    """
    if a.space is not None and b.space is not None and a.space != b.space:
        raise CoordSpaceError(f"boxes live in different spaces: {a.space} vs {b.space}")
    ix0 = max(a.x0, b.x0)
    iy0 = max(a.y0, b.y0)
    ix1 = min(a.x1, b.x1)
    iy1 = min(a.y1, b.y1)
    iw = max(0.0, ix1 - ix0)
    ih = max(0.0, iy1 - iy0)
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


def rle_encode(bitmask: np.ndarray) -> MaskRLE:
    """Encode a 2-D binary grid as column-major run lengths.

    Nonzero pixels count as foreground. Runs are traced top-to-bottom,
    then left-to-right; the first run covers background pixels.
    """
    grid = np.asarray(bitmask)
    if grid.ndim != 2 or grid.size == 0:
        raise DimensionError(f"expected a non-empty 2-D grid, got shape {grid.shape}")
    flat = grid.astype(bool).ravel(order="F")
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return MaskRLE(height=grid.shape[0], width=grid.shape[1], counts=tuple(runs))


def rle_decode(m: MaskRLE) -> np.ndarray:
    """Decode a MaskRLE back into a 2-D boolean grid; exact inverse of encode."""
    values = np.arange(len(m.counts)) % 2 == 1  # runs alternate starting with background
    flat = np.repeat(values, np.asarray(m.counts, dtype=np.int64))
    return flat.reshape((m.height, m.width), order="F")


def map_box(
    b: BBox,
    m: AffineMap,
    direction: MapDirection,
    target_space: Optional[CoordSpace] = None,
) -> BBox:
    """Scale a box between original and preprocessed coordinates, corner-wise.

    ``to_preprocessed`` multiplies by ``(sx, sy)``; ``to_original`` divides.
    If the box declares a space it must be the source space of ``direction``.
    """
    if direction == "to_preprocessed":
        if b.space is not None and b.space.tag != ORIGINAL:
            raise CoordSpaceError(f"to_preprocessed expects an original-space box, got {b.space.tag}")
        return BBox(b.x0 * m.sx, b.y0 * m.sy, b.x1 * m.sx, b.y1 * m.sy, space=target_space)
    if direction == "to_original":
        if b.space is not None and b.space.tag != PREPROCESSED:
            raise CoordSpaceError(f"to_original expects a preprocessed-space box, got {b.space.tag}")
        return BBox(b.x0 / m.sx, b.y0 / m.sy, b.x1 / m.sx, b.y1 / m.sy, space=target_space)
    raise ValueError(f"unknown direction {direction!r}")
