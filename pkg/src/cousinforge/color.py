"""RGB to HSV conversion and the 512-bin HSV histogram descriptor.

The histogram is the shared sky/appearance descriptor: hue in [0, 360)
split into 8 bins, saturation and value in [0, 1] split into 8 bins
each, flattened as index = h_bin*64 + s_bin*8 + v_bin and normalized to
sum 1. Values exactly at 1.0 fall into the top bin.
"""

from __future__ import annotations

import numpy as np

HIST_BINS = 512


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Convert (..., 3) RGB in [0, 1] to HSV with H in [0, 360), S, V in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    delta = maxc - minc
    safe = np.where(delta == 0, 1.0, delta)
    h = np.where(
        delta == 0,
        0.0,
        np.where(
            maxc == r,
            ((g - b) / safe) % 6.0,
            np.where(maxc == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
        ),
    )
    h = (h * 60.0) % 360.0
    s = np.where(maxc == 0, 0.0, delta / np.where(maxc == 0, 1.0, maxc))
    return np.stack([h, s, maxc], axis=-1)


def hsv_histogram(rgb: np.ndarray) -> np.ndarray:
    """512-bin normalized HSV histogram of an RGB image.

    Accepts uint8 (scaled by 255) or float arrays already in [0, 1],
    shape (..., 3). Returns a float64 vector of length 512 summing to 1.
    """
    rgb = np.asarray(rgb)
    if rgb.shape[-1] != 3:
        raise ValueError(f"expected trailing channel dim 3, got shape {rgb.shape}")
    if rgb.size == 0:
        raise ValueError("cannot build a histogram of an empty image")
    if rgb.dtype == np.uint8:
        rgb = rgb.astype(np.float64) / 255.0
    hsv = rgb_to_hsv(rgb).reshape(-1, 3)
    h_bin = np.minimum((hsv[:, 0] / 45.0).astype(np.int64), 7)
    s_bin = np.minimum((hsv[:, 1] * 8.0).astype(np.int64), 7)
    v_bin = np.minimum((hsv[:, 2] * 8.0).astype(np.int64), 7)
    index = h_bin * 64 + s_bin * 8 + v_bin
    hist = np.bincount(index, minlength=HIST_BINS).astype(np.float64)
    return hist / hist.sum()
