"""Graph-based greedy region segmentation (Felzenszwalb-Huttenlocher style).

Pipeline: Gaussian-smooth the grayscale image, build the 8-connected pixel
graph with |intensity difference| edge weights, sort edges non-decreasingly
(ties broken by construction order: row-major pixel, then offsets E, SE, S,
SW), then greedily merge components when the edge weight does not exceed
min(Int(C1) + k/|C1|, Int(C2) + k/|C2|).  A final pass absorbs components
smaller than min_size into their nearest neighbor along the sorted edges,
and labels are renumbered contiguously in order of first pixel occurrence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .images import Image, RegionMap, smooth2d

__all__ = ["FelzParams", "felzenszwalb_segment"]


@dataclass(frozen=True)
class FelzParams:
    """Knobs of the greedy merge: k_scale, pre-smoothing sigma, min region size."""

    k_scale: float = 0.5
    sigma: float = 0.8
    min_size: int = 20

    def __post_init__(self):
        if self.k_scale <= 0:
            raise ValueError(f"FelzParams: k_scale must be > 0, got {self.k_scale}")
        if self.sigma < 0:
            raise ValueError(f"FelzParams: sigma must be >= 0, got {self.sigma}")
        if self.min_size < 1:
            raise ValueError(f"FelzParams: min_size must be >= 1, got {self.min_size}")


# offsets east, south-east, south, south-west; dir rank = construction order
_OFFSETS = ((0, 1), (1, 1), (1, 0), (1, -1))


def _build_edges(img: np.ndarray):
    """8-connected grid edges with |dI| weights, in construction order."""
    h, w = img.shape
    idx = np.arange(h * w, dtype=np.int64).reshape(h, w)
    flat = img.ravel()
    pa, pb, code = [], [], []
    for rank, (dy, dx) in enumerate(_OFFSETS):
        x0 = max(0, -dx)
        x1 = w - max(0, dx)
        if x1 <= x0 or dy >= h:
            continue
        p = idx[0:h - dy, x0:x1]
        q = idx[dy:h, x0 + dx:x1 + dx]
        pa.append(p.ravel())
        pb.append(q.ravel())
        code.append(p.ravel() * 4 + rank)
    ea = np.concatenate(pa)
    eb = np.concatenate(pb)
    codes = np.concatenate(code)
    weights = np.abs(flat[ea] - flat[eb])
    # stable non-decreasing order; equal weights resolved by construction index
    order = np.lexsort((codes, weights))
    return ea, eb, weights, order


@njit(cache=True)
def _find(parent, p):
    root = p
    while parent[root] != root:
        root = parent[root]
    while parent[p] != root:
        nxt = parent[p]
        parent[p] = root
        p = nxt
    return root


@njit(cache=True)
def _segment_core(order, ea, eb, weights, n, k, min_size, labels_out):
    parent = np.arange(n)
    size = np.ones(n, dtype=np.int64)
    internal = np.zeros(n, dtype=np.float64)

    for t in range(order.shape[0]):
        e = order[t]
        a = _find(parent, ea[e])
        b = _find(parent, eb[e])
        if a == b:
            continue
        w = weights[e]
        if w <= min(internal[a] + k / size[a], internal[b] + k / size[b]):
            parent[b] = a
            size[a] += size[b]
            internal[a] = w

    for t in range(order.shape[0]):
        e = order[t]
        a = _find(parent, ea[e])
        b = _find(parent, eb[e])
        if a != b and (size[a] < min_size or size[b] < min_size):
            parent[b] = a
            size[a] += size[b]

    # contiguous relabel in order of first pixel occurrence
    marks = np.full(n, -1, dtype=np.int64)
    next_label = 0
    for p in range(n):
        r = _find(parent, p)
        if marks[r] < 0:
            marks[r] = next_label
            next_label += 1
        labels_out[p] = marks[r]
    return next_label


def felzenszwalb_segment(image: Image, params: FelzParams) -> RegionMap:
    """Segment a grayscale image into regions; see module docstring."""
    if image.channels != 1:
        raise ValueError(
            f"felzenszwalb_segment: expected single-channel image, got {image.channels} channels"
        )
    smoothed = smooth2d(image.gray(), params.sigma)
    h, w = smoothed.shape
    n = h * w
    if n == 1:
        return RegionMap(np.zeros((1, 1), dtype=np.int64), 1)
    ea, eb, weights, order = _build_edges(smoothed)
    labels = np.empty(n, dtype=np.int64)
    count = _segment_core(order, ea, eb, weights, n, float(params.k_scale),
                          int(params.min_size), labels)
    return RegionMap(labels.reshape(h, w), int(count))
