"""Elastic deformation fields and warped positive-pair construction.

A field starts as i.i.d. uniform[-1, 1] noise per component, is Gaussian
smoothed (sigma_e, replicated borders), then each component is rescaled so
its max |displacement| equals alpha pixels exactly.  Intensities warp with
bilinear interpolation, label maps with nearest-neighbor lookup; sample
coordinates are clamped to the image rectangle.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .images import Image, RegionMap, smooth2d

__all__ = ["ElasticParams", "DisplacementField", "gen_field", "warp_image",
           "warp_labels", "elastic_pair"]


@dataclass(frozen=True)
class ElasticParams:
    alpha: float = 4.0        # peak displacement magnitude, pixels, per axis
    sigma_e: float = 8.0      # smoothing of the raw noise field
    seed: int = 0
    max_retries: int = 5      # attempts before accepting a lossy label warp

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"ElasticParams: alpha must be >= 0, got {self.alpha}")
        if self.sigma_e <= 0:
            raise ValueError(f"ElasticParams: sigma_e must be > 0, got {self.sigma_e}")
        if self.max_retries < 1:
            raise ValueError(f"ElasticParams: max_retries must be >= 1, got {self.max_retries}")


@dataclass
class DisplacementField:
    """Per-pixel displacements in pixels: dx along columns, dy along rows."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        if self.dx.shape != self.dy.shape or self.dx.ndim != 2:
            raise ValueError(
                f"DisplacementField: dx/dy must be equal 2-D shapes, got {self.dx.shape} vs {self.dy.shape}"
            )
        if not (np.all(np.isfinite(self.dx)) and np.all(np.isfinite(self.dy))):
            raise ValueError("DisplacementField: non-finite displacement")


def gen_field(params: ElasticParams, height: int, width: int) -> DisplacementField:
    """Seeded smoothed-noise field with per-component peak |d| == alpha.

    alpha == 0 yields the all-zero field without consuming any randomness.
    dx is drawn before dy.
    """
    if height < 1 or width < 1:
        raise ValueError(f"gen_field: bad field size {height}x{width}")
    if params.alpha == 0:
        z = np.zeros((height, width), dtype=np.float64)
        return DisplacementField(z, z.copy())
    rng = np.random.default_rng(params.seed)
    comps = []
    for _ in range(2):  # dx, then dy
        raw = rng.uniform(-1.0, 1.0, size=(height, width))
        s = smooth2d(raw, params.sigma_e)
        peak = np.abs(s).max()
        comps.append(s * (params.alpha / peak) if peak > 0 else s)
    return DisplacementField(comps[0], comps[1])


def _sample_coords(field: DisplacementField, shape: tuple):
    h, w = shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    sx = np.clip(xs + field.dx, 0.0, w - 1.0)
    sy = np.clip(ys + field.dy, 0.0, h - 1.0)
    return sy, sx


def warp_image(image: Image, field: DisplacementField) -> Image:
    """Bilinear warp of all channels; source coords clamp at the border."""
    if field.dx.shape != (image.height, image.width):
        raise ValueError(
            f"warp_image: field shape {field.dx.shape} does not match image "
            f"{image.height}x{image.width}"
        )
    h, w = image.height, image.width
    sy, sx = _sample_coords(field, (h, w))
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = sy - y0
    fx = sx - x0
    out = np.empty_like(image.data)
    for c in range(image.channels):
        ch = image.data[:, :, c]
        top = ch[y0, x0] * (1 - fx) + ch[y0, x1] * fx
        bot = ch[y1, x0] * (1 - fx) + ch[y1, x1] * fx
        out[:, :, c] = top * (1 - fy) + bot * fy
    return Image(np.clip(out, 0.0, 1.0))


def warp_labels(rmap: RegionMap, field: DisplacementField) -> RegionMap:
    """Nearest-neighbor warp of a label map; label values are preserved.

    The result keeps the input's label domain but may lose labels, so it
    validates as a 'domain' RegionMap.
    """
    if field.dx.shape != rmap.labels.shape:
        raise ValueError(
            f"warp_labels: field shape {field.dx.shape} does not match labels {rmap.labels.shape}"
        )
    sy, sx = _sample_coords(field, rmap.labels.shape)
    yi = np.rint(sy).astype(np.int64)
    xi = np.rint(sx).astype(np.int64)
    return RegionMap(rmap.labels[yi, xi], rmap.region_count, validate="domain")


def elastic_pair(image: Image, rmap: RegionMap, params: ElasticParams):
    """Warped view of (image, regions) for positive-pair training.

    Tries up to ``max_retries`` fields (attempt k reseeds with seed + k)
    looking for a warp that keeps every region alive; if none does, the
    last attempt is used.  Returns ``(warped_image, warped_map,
    surviving)`` where ``surviving`` lists the labels present in both maps
    in increasing order — downstream losses must restrict themselves to it.
    """
    if rmap.labels.shape != (image.height, image.width):
        raise ValueError(
            f"elastic_pair: region map {rmap.labels.shape} does not match image "
            f"{image.height}x{image.width}"
        )
    field = None
    warped_map = None
    for attempt in range(params.max_retries):
        field = gen_field(replace(params, seed=params.seed + attempt),
                          image.height, image.width)
        warped_map = warp_labels(rmap, field)
        if warped_map.present_labels().size == len(np.unique(rmap.labels)):
            break
    warped = warp_image(image, field)
    before = set(np.unique(rmap.labels).tolist())
    after = set(warped_map.present_labels().tolist())
    surviving = sorted(before & after)
    return warped, warped_map, surviving
