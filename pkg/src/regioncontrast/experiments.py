"""End-to-end studies: representation separation, fine-tuning gain, N ablation.

These wire phantoms + segmentation + pretraining + evaluation together
and are what the acceptance checks and the scripts/ entry points call.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .clustering import cluster_purity, kmeans, subsample_points
from .config import RunConfig
from .elastic import elastic_pair
from .felzenszwalb import felzenszwalb_segment
from .images import Image
from .losses import build_sample_mean_set
from .networks import GlobalEncoder, LocalUNet, forward_local
from .phantoms import gen_phantom
from .training import evaluate_dice, finetune, pretrain_global, pretrain_local

__all__ = [
    "dataset_slices",
    "SeparationResult",
    "separation_metrics",
    "representation_separation",
    "FinetunePair",
    "finetune_gain",
    "ablate_n_samples",
]

_MAX_CLUSTER_POINTS = 4096


def _phantom_range(cfg: RunConfig, start: int, count: int):
    images, labels = [], []
    for i in range(start, start + count):
        img, lab = gen_phantom(cfg.phantom, i)
        images.append(img)
        labels.append(lab)
    return images, labels


def dataset_slices(cfg: RunConfig):
    """Index-disjoint phantom sets: (pretrain, finetune+labels, val+labels).

    Pretraining takes indices [0, count); fine-tuning the next
    ``finetune_count``; validation the next ``round(val_fraction * count)``.
    Per-image seeding makes each window independent of the others' sizes.
    """
    n_pre = cfg.data.count
    n_ft = cfg.data.finetune_count
    n_val = max(1, round(cfg.data.val_fraction * cfg.data.count))
    pre_images, _ = _phantom_range(cfg, 0, n_pre)
    ft_images, ft_labels = _phantom_range(cfg, n_pre, n_ft)
    val_images, val_labels = _phantom_range(cfg, n_pre + n_ft, n_val)
    return pre_images, (ft_images, ft_labels), (val_images, val_labels)


@dataclass
class SeparationResult:
    """Embedding-space quality of a pretrained LocalUNet on held-out phantoms."""

    seed: int
    pos_dot: float            # mean same-region cross-view mean-feature dot
    neg_dot: float            # mean different-region cross-view dot
    embedding_purity: float   # K-Means on features vs ground-truth organs
    intensity_purity: float   # K-Means on raw intensities vs ground truth
    skipped: int


_KMEANS_RESTARTS = 5


def _best_kmeans(points: np.ndarray, k: int, seed: int):
    """Lowest-inertia result over a handful of k-means++ initializations."""
    best = None
    for r in range(_KMEANS_RESTARTS):
        res = kmeans(points, k, seed=[seed, r])
        if best is None or res.inertia < best.inertia:
            best = res
    return best


def separation_metrics(net: LocalUNet, images: Sequence[Image],
                       labels: Sequence[np.ndarray], cfg: RunConfig,
                       seed: int) -> tuple:
    """(pos_dot, neg_dot, embedding_purity, intensity_purity) on a dataset.

    Per image: segment, build an elastic positive view, compare sampled
    region means across views.  The embedding is scored the way it is
    trained — each pixel carries its region's mean feature vector — and
    those vectors are clustered into as many groups as the ground truth
    has classes.  The baseline clusters raw pixel intensities with the
    same K, the same pixel subset, and the same restart policy.
    """
    pos, neg, emb_pur, raw_pur = [], [], [], []
    tc = cfg.train
    for i, (image, lab) in enumerate(zip(images, labels)):
        rmap = felzenszwalb_segment(image, tc.felz)
        eparams = replace(tc.elastic, seed=seed ^ (7919 + i))
        warped, warped_map, surviving = elastic_pair(image, rmap, eparams)
        if not surviving:
            continue
        fq = forward_local(net, image)
        fp = forward_local(net, warped)
        ms_q = build_sample_mean_set(fq, rmap, surviving, tc.n_samples,
                                     seed=[seed, 41, i], normalize=tc.normalize_local_means)
        ms_p = build_sample_mean_set(fp, warped_map, surviving, tc.n_samples,
                                     seed=[seed, 42, i], normalize=tc.normalize_local_means)
        q, p = ms_q.means.data, ms_p.means.data
        sims = q @ p.T
        k = len(surviving)
        pos.extend(np.diagonal(sims).tolist())
        if k > 1:
            off = sims[~np.eye(k, dtype=bool)]
            neg.extend(off.tolist())

        n_groups = len(np.unique(lab))
        feats = fq.data
        region_means = np.stack([feats[rmap.labels == r].mean(axis=0)
                                 for r in range(rmap.region_count)])
        feat_pts = region_means[rmap.labels].reshape(-1, region_means.shape[1])
        raw_pts = image.gray().reshape(-1, 1)
        ref = lab.ravel()
        if feat_pts.shape[0] > _MAX_CLUSTER_POINTS:
            keep = subsample_points(np.arange(feat_pts.shape[0])[:, None],
                                    _MAX_CLUSTER_POINTS, seed=[seed, 43, i])[:, 0]
            feat_pts, raw_pts, ref = feat_pts[keep], raw_pts[keep], ref[keep]
        emb = _best_kmeans(feat_pts, n_groups, seed=seed ^ (104729 + i))
        raw = _best_kmeans(raw_pts, n_groups, seed=seed ^ (104729 + i))
        emb_pur.append(cluster_purity(emb.assignments, ref))
        raw_pur.append(cluster_purity(raw.assignments, ref))
    if not pos or not emb_pur:
        raise RuntimeError("separation_metrics: no usable images")
    return (float(np.mean(pos)),
            float(np.mean(neg)) if neg else float("-inf"),
            float(np.mean(emb_pur)),
            float(np.mean(raw_pur)))


def representation_separation(cfg: RunConfig, seed: int,
                              held_out: int = 20) -> SeparationResult:
    """Pretrain a LocalUNet on the configured corpus; score held-out images."""
    run = cfg.with_seed(seed)
    train_images, _ = _phantom_range(run, 0, run.data.count)
    held_images, held_labels = _phantom_range(run, run.data.count, held_out)
    net, _, skipped = pretrain_local(train_images, run.train)
    pos, neg, emb, raw = separation_metrics(net, held_images, held_labels, run, seed)
    return SeparationResult(seed=seed, pos_dot=pos, neg_dot=neg,
                            embedding_purity=emb, intensity_purity=raw,
                            skipped=skipped)


@dataclass
class FinetunePair:
    """Val Dice of pretrained-init vs random-init fine-tuning, same seed."""

    seed: int
    dice_pretrained: float
    dice_random: float


def finetune_gain(cfg: RunConfig, seeds: Sequence[int],
                  pretrained: Optional[tuple] = None) -> list:
    """Paired fine-tuning comparison over seeds.

    ``pretrained`` may supply (GlobalEncoder, LocalUNet) weights; when
    None they are pretrained once here (on the pretraining window) and
    reused — the per-seed variation then isolates fine-tuning
    stochasticity (fusion head init, data order), which is what the
    comparison is about.  For each seed the random arm uses freshly
    initialized encoder/U-Net weights but the identical fine-tune seed,
    so head init and data order match the pretrained arm.
    """
    pre_images, (ft_images, ft_labels), (val_images, val_labels) = dataset_slices(cfg)
    if pretrained is None:
        genc, _ = pretrain_global(pre_images, cfg.train)
        local, _, _ = pretrain_local(pre_images, cfg.train)
    else:
        genc, local = pretrained
    results = []
    for seed in seeds:
        tc = replace(cfg.train, seed=seed)
        model_p, _ = finetune(genc.clone(), local.clone(),
                              ft_images, ft_labels, val_images, val_labels, tc)
        rand_g = GlobalEncoder(embed_dim=genc.embed_dim, widths=genc.widths,
                               in_channels=genc.in_channels, seed=seed + 5077)
        rand_l = LocalUNet(feature_dim=local.feature_dim, widths=local.widths,
                           in_channels=local.in_channels, seed=seed + 7103)
        model_r, _ = finetune(rand_g, rand_l,
                              ft_images, ft_labels, val_images, val_labels, tc)
        results.append(FinetunePair(
            seed=seed,
            dice_pretrained=evaluate_dice(model_p, val_images, val_labels).mean,
            dice_random=evaluate_dice(model_r, val_images, val_labels).mean,
        ))
    return results


def ablate_n_samples(cfg: RunConfig, ns: Sequence[int] = (10, 50, 100)) -> dict:
    """Mean val Dice after the full pipeline for each region-sample count N.

    The global encoder is pretrained once (N does not affect it); the
    localized pretraining and fine-tuning rerun per N.  Returns
    {str(N): dice_mean}.
    """
    pre_images, (ft_images, ft_labels), (val_images, val_labels) = dataset_slices(cfg)
    genc, _ = pretrain_global(pre_images, cfg.train)
    out = {}
    for n in ns:
        tc = replace(cfg.train, n_samples=int(n))
        local, _, _ = pretrain_local(pre_images, tc)
        model, _ = finetune(genc.clone(), local, ft_images, ft_labels,
                            val_images, val_labels, tc)
        report = evaluate_dice(model, val_images, val_labels)
        out[str(int(n))] = report.mean
    return out
