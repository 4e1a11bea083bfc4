"""Color overlays of label maps (regions, clusters) on grayscale images."""

from __future__ import annotations

import colorsys

import numpy as np

from .images import Image
from .netpbm import write_ppm

__all__ = ["label_palette", "render_overlay"]

_GOLDEN = 0.6180339887498949  # conjugate golden ratio: well-spread hues


def label_palette(n: int) -> np.ndarray:
    """(n, 3) uint8 palette; label k gets hue (k * golden) mod 1, full S/V."""
    if n < 1:
        raise ValueError(f"label_palette: need n >= 1, got {n}")
    out = np.empty((n, 3), dtype=np.uint8)
    for k in range(n):
        r, g, b = colorsys.hsv_to_rgb((k * _GOLDEN) % 1.0, 1.0, 1.0)
        out[k] = (round(r * 255), round(g * 255), round(b * 255))
    return out


def render_overlay(image: Image, labels: np.ndarray, path=None) -> np.ndarray:
    """50% alpha blend of a label coloring over the grayscale image.

    Returns the uint8 (H, W, 3) array; also writes it as binary PPM when
    ``path`` is given.
    """
    lab = np.asarray(labels)
    if lab.shape != (image.height, image.width):
        raise ValueError(
            f"render_overlay: labels {lab.shape} do not match image "
            f"{image.height}x{image.width}"
        )
    if not np.issubdtype(lab.dtype, np.integer) or lab.min() < 0:
        raise ValueError("render_overlay: labels must be non-negative integers")
    palette = label_palette(int(lab.max()) + 1)
    color = palette[lab].astype(np.float64)
    gray = (image.gray() * 255.0)[:, :, None]
    blended = np.clip(np.rint(0.5 * color + 0.5 * gray), 0, 255).astype(np.uint8)
    if path is not None:
        write_ppm(path, blended)
    return blended
