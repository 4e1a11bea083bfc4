"""Region sampling, contrastive losses, Dice loss, per-pixel softmax.

The localized loss treats each region's sampled mean feature vector as one
"instance": for query view q and positive view p with K shared regions,

    L = -sum_k1 log( exp(mq_k1 . mp_k1 / tau)
                     / sum_k2 [ exp(mq_k1 . mq_k2 / tau) + exp(mq_k1 . mp_k2 / tau) ] )

with the k2 == k1 self-similarity term included in the denominator by
default (``include_self_term=False`` drops it from the q.q sum only).
Everything here registers fused tape nodes with hand-derived backward
rules; the finite-difference suite in the tests is their ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import (Tensor, add, dot, exp, log, mul_scalar, record)
from .images import RegionMap

__all__ = [
    "sample_region_mean",
    "SampleMeanSet",
    "build_sample_mean_set",
    "local_contrastive_loss",
    "GlobalBatch",
    "global_infonce",
    "dice_loss",
    "softmax_channels",
    "one_hot",
]


def _region_pixels(rmap: RegionMap, region_id: int) -> np.ndarray:
    """Row-major flat indices of a region's pixels."""
    if not 0 <= region_id < rmap.region_count:
        raise ValueError(
            f"region id {region_id} outside map domain 0..{rmap.region_count - 1}"
        )
    pix = np.flatnonzero(rmap.labels.ravel() == region_id)
    if pix.size == 0:
        raise ValueError(f"region {region_id} has no pixels in this map")
    return pix


def _check_fmap(fmap: Tensor, rmap: RegionMap) -> None:
    if fmap.data.ndim != 3 or fmap.data.shape[:2] != rmap.labels.shape:
        raise ValueError(
            f"feature map shape {fmap.data.shape} does not match region map {rmap.labels.shape}"
        )


def sample_region_mean(fmap: Tensor, rmap: RegionMap, region_id: int,
                       n_samples: int, rng: np.random.Generator) -> Tensor:
    """Mean of n feature vectors drawn uniformly with replacement from a region.

    Consumes exactly one ``rng.integers(0, region_size, size=n_samples)``
    call over the region's row-major pixel list, so a caller holding a
    generator seeded the same way can replay the draw.  n_samples may
    exceed the region size (duplicates are the point of sampling with
    replacement).  The gradient scatters each pixel's draw multiplicity
    divided by n_samples back onto the feature map.
    """
    _check_fmap(fmap, rmap)
    if n_samples < 1:
        raise ValueError(f"sample_region_mean: n_samples must be >= 1, got {n_samples}")
    pix = _region_pixels(rmap, region_id)
    draws = rng.integers(0, pix.size, size=n_samples)
    counts = np.bincount(draws, minlength=pix.size).astype(np.float64)
    d = fmap.data.shape[2]
    feats = fmap.data.reshape(-1, d)
    mean = (counts @ feats[pix]) / n_samples
    out = Tensor(mean)
    weights = counts / n_samples
    shape = fmap.data.shape

    def bwd(g):
        gf = np.zeros((shape[0] * shape[1], d), dtype=np.float64)
        gf[pix] = np.outer(weights, g)
        return (gf.reshape(shape),)

    return record("sample_region_mean", out, (fmap,), bwd)


@dataclass
class SampleMeanSet:
    """Sampled mean vectors for an ordered list of regions of one view.

    ``means`` is a (K, D) Tensor; row k corresponds to ``region_ids[k]``.
    """

    means: Tensor
    region_ids: tuple
    n_samples: int


def build_sample_mean_set(fmap: Tensor, rmap: RegionMap,
                          region_ids: Sequence[int], n_samples: int,
                          seed: int, normalize: bool = False) -> SampleMeanSet:
    """Sampled means for several regions, fused into one (K, D) tape node.

    One ``np.random.default_rng(seed)`` generator is consumed sequentially
    in ``region_ids`` order, one ``integers`` call per region — the same
    protocol as calling :func:`sample_region_mean` in a loop, but the
    backward scatters all rows into a single feature-map gradient.  With
    ``normalize`` each mean is L2-normalized (eps 1e-12 inside the sqrt).
    """
    _check_fmap(fmap, rmap)
    ids = tuple(int(r) for r in region_ids)
    if len(ids) == 0:
        raise ValueError("build_sample_mean_set: empty region list")
    if n_samples < 1:
        raise ValueError(f"build_sample_mean_set: n_samples must be >= 1, got {n_samples}")
    rng = np.random.default_rng(seed)
    h, w, d = fmap.data.shape
    feats = fmap.data.reshape(-1, d)
    rows = np.empty((len(ids), d), dtype=np.float64)
    scatter = []  # (pixel indices, per-pixel weights) per row
    for k, rid in enumerate(ids):
        pix = _region_pixels(rmap, rid)
        draws = rng.integers(0, pix.size, size=n_samples)
        weights = np.bincount(draws, minlength=pix.size).astype(np.float64) / n_samples
        rows[k] = weights @ feats[pix]
        scatter.append((pix, weights))

    norms = None
    if normalize:
        norms = np.sqrt((rows * rows).sum(axis=1) + 1e-12)
        out_rows = rows / norms[:, None]
    else:
        out_rows = rows
    out = Tensor(out_rows)

    def bwd(g):
        if norms is not None:
            # d(m/n)/dm applied row-wise: g/n - m (m.g)/n^3
            mg = (rows * g).sum(axis=1)
            g = g / norms[:, None] - rows * (mg / norms**3)[:, None]
        gf = np.zeros((h * w, d), dtype=np.float64)
        for k, (pix, weights) in enumerate(scatter):
            gf[pix] += np.outer(weights, g[k])
        return (gf.reshape(h, w, d),)

    means = record("sample_mean_set", out, (fmap,), bwd)
    return SampleMeanSet(means=means, region_ids=ids, n_samples=n_samples)


def local_contrastive_loss(query: SampleMeanSet, positive: SampleMeanSet,
                           tau: float, include_self_term: bool = True) -> Tensor:
    """Region-level contrastive loss between two views (see module docstring).

    Logits are max-shifted per row before exponentiation, so large
    dot-product scales stay finite.  K == 1 with the self term gives
    exactly ln 2.
    """
    if tau <= 0:
        raise ValueError(f"local_contrastive_loss: tau must be > 0, got {tau}")
    if query.region_ids != positive.region_ids:
        raise ValueError(
            f"local_contrastive_loss: views cover different regions: "
            f"{query.region_ids} vs {positive.region_ids}"
        )
    mq, mp = query.means, positive.means
    k, d = mq.data.shape
    if mp.data.shape != (k, d):
        raise ValueError(f"local_contrastive_loss: shape mismatch {mq.data.shape} vs {mp.data.shape}")

    q = mq.data
    p = mp.data
    sqq = (q @ q.T) / tau
    sqp = (q @ p.T) / tau
    logits = np.concatenate([sqq, sqp], axis=1)  # (K, 2K): [q.q | q.p]
    if not include_self_term:
        np.fill_diagonal(logits[:, :k], -np.inf)
    shift = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - shift)
    denom = ex.sum(axis=1, keepdims=True)
    soft = ex / denom
    # per-row loss: log(denom) + shift - positive logit
    pos = np.diagonal(sqp)
    losses = np.log(denom[:, 0]) + shift[:, 0] - pos
    value = float(losses.sum())
    if not math.isfinite(value):
        raise ValueError("local_contrastive_loss: non-finite loss")
    out = Tensor(np.float64(value))

    def bwd(g):
        grad = soft.copy()
        grad[np.arange(k), k + np.arange(k)] -= 1.0
        gqq = grad[:, :k]
        gqp = grad[:, k:]
        dq = (gqq @ q + gqp @ p + gqq.T @ q) * (float(g) / tau)
        dp = (gqp.T @ q) * (float(g) / tau)
        return dq, dp

    return record("local_contrastive_loss", out, (mq, mp), bwd)


@dataclass
class GlobalBatch:
    """One query embedding, its positive, and the other items as negatives.

    All embeddings must arrive L2-normalized (checked to 1e-9).
    """

    z_query: Tensor
    z_positive: Tensor
    z_negatives: Sequence[Tensor]
    tau: float

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"GlobalBatch: tau must be > 0, got {self.tau}")
        vecs = [self.z_query, self.z_positive, *self.z_negatives]
        d = self.z_query.data.shape
        for i, z in enumerate(vecs):
            if z.data.ndim != 1 or z.data.shape != d:
                raise ValueError(f"GlobalBatch: embedding {i} has shape {z.data.shape}, want {d}")
            nrm = float(np.linalg.norm(z.data))
            if abs(nrm - 1.0) > 1e-9:
                raise ValueError(f"GlobalBatch: embedding {i} not unit-norm (|z| = {nrm:.12f})")


def global_infonce(batch: GlobalBatch, literal_denominator: bool = False) -> Tensor:
    """Image-level InfoNCE, composed from primitive tape ops.

    Standard form: -log( exp(q.p/tau) / [exp(q.p/tau) + sum_neg exp(q.n/tau)] ).
    ``literal_denominator`` replaces the q.p term in the denominator with
    q.q/tau (a transcription some write-ups use).  A detached max-shift
    keeps the exponentials finite.  With no negatives the standard form is
    exactly 0.
    """
    inv_tau = 1.0 / batch.tau
    pos = mul_scalar(dot(batch.z_query, batch.z_positive), inv_tau)
    neg = [mul_scalar(dot(batch.z_query, zn), inv_tau) for zn in batch.z_negatives]
    if literal_denominator:
        head = mul_scalar(dot(batch.z_query, batch.z_query), inv_tau)
    else:
        head = pos
    denom_logits = [head, *neg]
    shift = max(float(t.data) for t in denom_logits + [pos])
    mshift = Tensor(-shift)
    total = exp(add(denom_logits[0], mshift))
    for t in denom_logits[1:]:
        total = add(total, exp(add(t, mshift)))
    # loss = -(pos - shift) + log(sum exp(logit - shift))
    return add(mul_scalar(add(pos, mshift), -1.0), log(total))


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Integer (H, W) labels -> float64 (H, W, n_classes) indicator."""
    lab = np.asarray(labels)
    if lab.min() < 0 or lab.max() >= n_classes:
        raise ValueError(
            f"one_hot: labels span {lab.min()}..{lab.max()}, outside 0..{n_classes - 1}"
        )
    out = np.zeros((*lab.shape, n_classes), dtype=np.float64)
    np.put_along_axis(out, lab[..., None], 1.0, axis=-1)
    return out


_DICE_EPS = 1e-5


def dice_loss(probs: Tensor, target: np.ndarray) -> Tensor:
    """Soft multi-class Dice loss, averaged over classes.

    ``probs`` is (..., C) with each pixel's class distribution summing to 1
    (checked to 1e-6); ``target`` is a one-hot array of the same shape.

        loss = 1 - (1/C) sum_c (2 sum p_c g_c + eps) / (sum p_c + sum g_c + eps)
    """
    p = probs.data
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"dice_loss: probs {p.shape} vs target {t.shape}")
    if p.ndim < 2:
        raise ValueError(f"dice_loss: need (..., C) probabilities, got shape {p.shape}")
    c = p.shape[-1]
    rows = p.reshape(-1, c)
    worst = np.abs(rows.sum(axis=1) - 1.0).max()
    if worst > 1e-6:
        raise ValueError(f"dice_loss: probabilities do not sum to 1 (max deviation {worst:.3g})")
    tr = t.reshape(-1, c)
    inter = (rows * tr).sum(axis=0)
    psum = rows.sum(axis=0)
    gsum = tr.sum(axis=0)
    num = 2.0 * inter + _DICE_EPS
    den = psum + gsum + _DICE_EPS
    value = 1.0 - float((num / den).mean())
    out = Tensor(np.float64(value))
    shape = p.shape

    def bwd(g):
        # d/dp_mc of -(1/C) * num_c/den_c  =  -(1/C) (2 t_mc den_c - num_c) / den_c^2
        gp = -(2.0 * tr * den - num) / (c * den * den)
        return ((float(g) * gp).reshape(shape),)

    return record("dice_loss", out, (probs,), bwd)


def softmax_channels(logits: Tensor) -> Tensor:
    """Per-pixel softmax over the last axis of an (..., C) tensor."""
    z = logits.data
    if z.ndim < 1:
        raise ValueError("softmax_channels: need at least one axis")
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def bwd(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner),)

    return record("softmax_channels", out, (logits,), bwd)
