"""Core image and region-map types plus Gaussian smoothing."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from scipy.ndimage import convolve1d

__all__ = ["Image", "RegionMap", "region_sizes", "gaussian_smooth", "smooth2d"]


class Image:
    """Float64 image of shape (H, W, C) with values in [0, 1]."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"Image: expected (H, W, C) data, got shape {arr.shape}")
        if arr.size == 0:
            raise ValueError("Image: empty data")
        lo, hi = float(arr.min()), float(arr.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"Image: values must lie in [0, 1], got range [{lo:.4g}, {hi:.4g}]")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def gray(self) -> np.ndarray:
        """Single-channel (H, W) view/copy; channel-mean if multichannel."""
        if self.channels == 1:
            return self.data[:, :, 0]
        return self.data.mean(axis=2)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Image({self.height}x{self.width}x{self.channels})"


class RegionMap:
    """Integer label map partitioning an image into regions.

    A freshly segmented map has labels exactly {0..K-1} with every label
    occupied (``validate='full'``).  Warped maps keep the *domain*
    {0..K-1} but may lose labels, so they are constructed with
    ``validate='domain'``.
    """

    __slots__ = ("labels", "region_count")

    def __init__(self, labels: np.ndarray, region_count: Optional[int] = None,
                 validate: str = "full"):
        lab = np.asarray(labels)
        if lab.ndim != 2:
            raise ValueError(f"RegionMap: labels must be (H, W), got shape {lab.shape}")
        if not np.issubdtype(lab.dtype, np.integer):
            raise ValueError(f"RegionMap: labels must be integers, got dtype {lab.dtype}")
        lab = lab.astype(np.int64, copy=False)
        present = np.unique(lab)
        if present[0] < 0:
            raise ValueError(f"RegionMap: negative label {present[0]}")
        k = int(present[-1]) + 1 if region_count is None else int(region_count)
        if validate == "full":
            if len(present) != k or present[0] != 0 or present[-1] != k - 1:
                raise ValueError(
                    f"RegionMap: labels must be exactly 0..{k - 1} with all present, "
                    f"got {len(present)} distinct values in [{present[0]}, {present[-1]}]"
                )
        elif validate == "domain":
            if present[-1] >= k:
                raise ValueError(f"RegionMap: label {present[-1]} outside domain 0..{k - 1}")
        else:
            raise ValueError(f"RegionMap: unknown validate mode '{validate}'")
        self.labels = lab
        self.region_count = k

    @property
    def shape(self) -> tuple:
        return self.labels.shape

    def present_labels(self) -> np.ndarray:
        return np.unique(self.labels)

    def __repr__(self) -> str:  # pragma: no cover
        return f"RegionMap({self.labels.shape[0]}x{self.labels.shape[1]}, K={self.region_count})"


def region_sizes(rmap: RegionMap) -> np.ndarray:
    """Pixel count per label id, length == region_count (zeros for lost labels)."""
    return np.bincount(rmap.labels.ravel(), minlength=rmap.region_count)


def _gauss_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def smooth2d(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of a 2-D array, kernel radius ceil(3*sigma).

    Borders replicate the edge value.  sigma = 0 returns the input copied.
    """
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"smooth2d: expected 2-D array, got shape {a.shape}")
    if sigma < 0:
        raise ValueError(f"smooth2d: sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return a.copy()
    k = _gauss_kernel(sigma)
    out = convolve1d(a, k, axis=0, mode="nearest")
    return convolve1d(out, k, axis=1, mode="nearest")


def gaussian_smooth(image: Image, sigma: float) -> Image:
    """Per-channel Gaussian blur of an Image (values re-clipped to [0, 1])."""
    chans = [smooth2d(image.data[:, :, c], sigma) for c in range(image.channels)]
    out = np.stack(chans, axis=2)
    # convolution of [0,1] data with a unit-sum kernel stays in [0,1] up to fp error
    return Image(np.clip(out, 0.0, 1.0))
