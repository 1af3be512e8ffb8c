"""Box-format conversion and mask run-length encoding."""

from typing import Sequence

import numpy as np


def center_norm_to_corner_pixels(box: Sequence[float], width: int, height: int) -> list[float]:
    """Convert a detector-native (cx, cy, w, h) box, normalized to [0, 1],
    into corner pixels (x0, y0, x1, y1) of a width x height image."""
    cx, cy, w, h = (float(v) for v in box)
    return [
        (cx - w / 2.0) * width,
        (cy - h / 2.0) * height,
        (cx + w / 2.0) * width,
        (cy + h / 2.0) * height,
    ]


def rle_encode_mask(mask: np.ndarray) -> dict:
    """Encode a binary mask as uncompressed column-major RLE.

    Runs alternate background/foreground starting with background; the
    leading count is 0 when pixel (0, 0) is foreground. sum(counts) always
    equals height * width.
    """
    grid = np.asarray(mask, dtype=bool)
    if grid.ndim != 2 or grid.size == 0:
        raise ValueError(f"mask must be a non-empty 2-D grid, got shape {grid.shape}")
    flat = grid.flatten(order="F")
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    h, w = grid.shape
    return {"size": [int(h), int(w)], "counts": [int(c) for c in counts]}
