"""Histogram-of-oriented-gradients features as a :class:`FeatureGrid`.

Cells are 8x8 pixels with 9 unsigned orientation bins. Each point of the grid
is one 2x2-cell block, L2-normalized, clipped at 0.2 and renormalized, giving
36 values per point. Block (i, j) spans pixels ``[8j, 8j+16) x [8i, 8i+16)``
and is placed at its center corner ``(8j + 8, 8i + 8)``.
"""

from __future__ import annotations

import numpy as np
from skimage.feature import hog

from .dense import FeatureGrid

CELL = 8
BINS = 9


def hog_extract(image: np.ndarray) -> FeatureGrid:
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    if img.shape[0] < 2 * CELL or img.shape[1] < 2 * CELL:
        raise ValueError(f"image {img.shape[:2]} smaller than one {2 * CELL}-pixel block")
    blocks = hog(
        img,
        orientations=BINS,
        pixels_per_cell=(CELL, CELL),
        cells_per_block=(2, 2),
        block_norm="L2-Hys",
        feature_vector=False,
        channel_axis=-1 if img.ndim == 3 else None,
    )
    rows, cols = blocks.shape[:2]
    data = blocks.reshape(rows, cols, 4 * BINS).astype(np.float32)
    return FeatureGrid(CELL, CELL, CELL, data)

