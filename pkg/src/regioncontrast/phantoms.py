"""Synthetic "organ" phantoms: ellipses on a mid-gray background plus noise.

Each image draws 2-5 non-overlapping ellipses (>= 30 px each, separated by
a guard ring of background), assigns each a distinct tissue class with a
fixed intensity level, adds i.i.d. Gaussian noise, and clips to [0, 1].
Class 0 is background.  Organ classes are drawn as consecutive 1..n (a
class may be missing if its ellipse found no room) and their default
levels sit on a +-3*noise_std ladder around the background, so pixel
intensity alone barely separates neighbouring classes.  Image i
uses its own generator seeded with (seed, i), so datasets of different
lengths agree on shared indices.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_dilation

from .images import Image

__all__ = ["PhantomConfig", "gen_phantom", "gen_synthetic_dataset"]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PhantomConfig:
    size: int = 64
    organ_count_min: int = 2
    organ_count_max: int = 5
    # index 0 is background; 1..5 are the tissue classes.  The default
    # ladder puts the background mid-gray and the organ classes at
    # alternating +-3*noise_std steps around it, so neighbouring classes
    # are exactly at the separability floor: a single pixel's intensity
    # is a weak class cue, while region statistics remain clean.
    intensity_levels: tuple = (0.50, 0.35, 0.65, 0.20, 0.80, 0.05)
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.size < 16 or self.size % 4 != 0:
            raise ValueError(f"PhantomConfig: size must be >= 16 and divisible by 4, got {self.size}")
        if not 1 <= self.organ_count_min <= self.organ_count_max <= len(self.intensity_levels) - 1:
            raise ValueError(
                f"PhantomConfig: organ count range [{self.organ_count_min}, "
                f"{self.organ_count_max}] incompatible with {len(self.intensity_levels) - 1} classes"
            )
        if self.noise_std < 0:
            raise ValueError(f"PhantomConfig: noise_std must be >= 0, got {self.noise_std}")
        levels = np.sort(np.asarray(self.intensity_levels, dtype=np.float64))
        if levels[0] < 0 or levels[-1] > 1:
            raise ValueError(f"PhantomConfig: intensity levels outside [0, 1]: {self.intensity_levels}")
        gap = float(np.diff(levels).min()) if len(levels) > 1 else math.inf
        if self.noise_std > 0 and gap < 3.0 * self.noise_std - 1e-12:
            raise ValueError(
                f"PhantomConfig: smallest level gap {gap:.3g} is below 3 * noise_std "
                f"= {3 * self.noise_std:.3g}; classes would not be separable"
            )


_MIN_ORGAN_PIXELS = 30
_GUARD = 3  # background pixels kept between organs


def _ellipse_mask(size: int, cy: float, cx: float, a: float, b: float, theta: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    u = (xs - cx) * math.cos(theta) + (ys - cy) * math.sin(theta)
    v = -(xs - cx) * math.sin(theta) + (ys - cy) * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def gen_phantom(cfg: PhantomConfig, index: int):
    """One (Image, labels) pair; deterministic in (cfg.seed, index)."""
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.size
    n_organs = int(rng.integers(cfg.organ_count_min, cfg.organ_count_max + 1))
    # consecutive classes 1..n so every image uses the levels closest to
    # the background; permuted so placement order doesn't favour a class
    classes = rng.permutation(np.arange(1, n_organs + 1))

    labels = np.zeros((size, size), dtype=np.int64)
    occupied = np.zeros((size, size), dtype=bool)
    margin = size // 6
    ax_lo = max(3.5, size * 6.0 / 64.0)
    ax_hi = max(size * 16.0 / 64.0, ax_lo + 1.0)
    placed = 0
    for cls in classes:
        ok = False
        for attempt in range(400):
            cy = rng.uniform(margin, size - 1 - margin)
            cx = rng.uniform(margin, size - 1 - margin)
            # shrink when space gets tight
            hi = ax_hi if attempt < 200 else ax_lo + 1.0
            a = rng.uniform(ax_lo, hi)
            b = rng.uniform(ax_lo, hi)
            theta = rng.uniform(0.0, math.pi)
            mask = _ellipse_mask(size, cy, cx, a, b, theta)
            if mask.sum() < _MIN_ORGAN_PIXELS:
                continue
            if (binary_dilation(mask, iterations=_GUARD) & occupied).any():
                continue
            labels[mask] = cls
            occupied |= mask
            placed += 1
            ok = True
            break
        if not ok:
            if placed >= cfg.organ_count_min:
                logger.warning(
                    "gen_phantom: dropping organ of class %d (no room, size %d, index %d)",
                    cls, size, index)
                continue
            raise RuntimeError(
                f"gen_phantom: could not place organ of class {cls} after 400 attempts "
                f"(size {size}, index {index})"
            )

    levels = np.asarray(cfg.intensity_levels, dtype=np.float64)
    clean = levels[labels]
    if cfg.noise_std > 0:
        noisy = clean + cfg.noise_std * rng.standard_normal(clean.shape)
    else:
        noisy = clean
    return Image(np.clip(noisy, 0.0, 1.0)), labels


def gen_synthetic_dataset(cfg: PhantomConfig, count: int):
    """``count`` phantoms -> (list of Images, list of (H, W) int labels)."""
    if count < 1:
        raise ValueError(f"gen_synthetic_dataset: count must be >= 1, got {count}")
    images, labels = [], []
    for i in range(count):
        img, lab = gen_phantom(cfg, i)
        images.append(img)
        labels.append(lab)
    return images, labels
