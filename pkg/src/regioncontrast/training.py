"""Training loops: global pretraining, localized pretraining, fine-tuning.

Determinism contract: every stochastic choice flows from ``cfg.seed``
through tagged ``default_rng`` streams, and anything drawn per item uses
``cfg.seed ^ step`` so the sequence does not depend on how work is
batched.  Histories are one dict per epoch with the keys epoch / loss /
dice_mean / dice_per_class (None where not applicable).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tape, Tensor, add, l2_normalize, mul_scalar
from .config import TrainConfig
from .elastic import elastic_pair, gen_field, warp_image
from .felzenszwalb import felzenszwalb_segment
from .images import Image, RegionMap
from .losses import (GlobalBatch, build_sample_mean_set, dice_loss,
                     global_infonce, local_contrastive_loss, one_hot)
from .networks import (FusionSegmenter, GlobalEncoder, LocalUNet,
                       forward_global, forward_local)
from .optim import Adam, SgdMomentum, opt_step

__all__ = [
    "pretrain_global",
    "pretrain_local",
    "finetune",
    "evaluate_dice",
    "DiceReport",
    "write_history_jsonl",
]

logger = logging.getLogger(__name__)

# rng stream tags (second entry of the seed sequence)
_INIT_GLOBAL, _INIT_LOCAL, _INIT_FUSION = 11, 12, 13
_ORDER_GLOBAL, _ORDER_LOCAL, _ORDER_FT = 21, 22, 23
_SAMPLE_Q, _SAMPLE_P = 31, 32


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


def _stream_seed(seed: int, tag: int, step: int) -> list:
    return [seed, tag, step]


def _check_loss(value: float, what: str, step: int) -> float:
    if not math.isfinite(value):
        raise FloatingPointError(f"{what}: non-finite loss {value} at step {step}")
    return value


def _history_row(epoch: int, loss: float, dice_mean=None, dice_per_class=None) -> dict:
    return {"epoch": epoch, "loss": loss, "dice_mean": dice_mean,
            "dice_per_class": dice_per_class}


def write_history_jsonl(path, history: Sequence[dict]) -> None:
    """One JSON object per epoch, keys epoch/loss/dice_mean/dice_per_class."""
    with open(path, "w") as fh:
        for row in history:
            fh.write(json.dumps({
                "epoch": row["epoch"],
                "loss": row["loss"],
                "dice_mean": row.get("dice_mean"),
                "dice_per_class": row.get("dice_per_class"),
            }) + "\n")


def _elastic_view(image: Image, cfg: TrainConfig, step: int) -> Image:
    """Warped copy of an image for image-level positives."""
    params = replace(cfg.elastic, seed=cfg.seed ^ step)
    field = gen_field(params, image.height, image.width)
    return warp_image(image, field)


def pretrain_global(images: Sequence[Image], cfg: TrainConfig):
    """Image-level contrastive pretraining of a GlobalEncoder.

    Each step takes a batch of ``batch_size`` distinct images, picks one
    query (all of them with ``symmetric_global_queries``), builds its
    positive by elastic warp, and treats the other batch members as
    negatives.  Returns (encoder, history).
    """
    if len(images) < cfg.batch_size:
        raise ValueError(
            f"pretrain_global: need at least batch_size={cfg.batch_size} images, got {len(images)}"
        )
    net = GlobalEncoder(embed_dim=cfg.embed_dim, seed=int(_rng(cfg.seed, _INIT_GLOBAL).integers(2**31)))
    opt = SgdMomentum(lr=cfg.lr_global, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    order_rng = _rng(cfg.seed, _ORDER_GLOBAL)
    params = net.parameters()
    history = []
    step = 0
    for epoch in range(cfg.global_epochs):
        perm = order_rng.permutation(len(images))
        epoch_losses = []
        for start in range(0, len(images) - cfg.batch_size + 1, cfg.batch_size):
            batch = perm[start:start + cfg.batch_size]
            if cfg.symmetric_global_queries:
                query_positions = range(len(batch))
            else:
                query_positions = [int(order_rng.integers(len(batch)))]
            with Tape() as tape:
                embeds = [l2_normalize(forward_global(net, images[i])) for i in batch]
                terms = []
                for qpos in query_positions:
                    xq = images[batch[qpos]]
                    xp = _elastic_view(xq, cfg, step)
                    zp = l2_normalize(forward_global(net, xp))
                    negs = [embeds[j] for j in range(len(batch)) if j != qpos]
                    gb = GlobalBatch(embeds[qpos], zp, negs, cfg.tau_global)
                    terms.append(global_infonce(gb, cfg.literal_global_denominator))
                if len(terms) == 1:
                    loss = terms[0]
                else:
                    acc = terms[0]
                    for t in terms[1:]:
                        acc = add(acc, t)
                    loss = mul_scalar(acc, 1.0 / len(terms))
            value = _check_loss(float(loss.data), "pretrain_global", step)
            tape.backward(loss)
            opt_step(opt, params, [tape.grad(p) for p in params])
            epoch_losses.append(value)
            step += 1
        history.append(_history_row(epoch, float(np.mean(epoch_losses))))
    return net, history


def _regions_for(image: Image, cfg: TrainConfig, cache: Optional[dict], key: int) -> RegionMap:
    if cache is not None and key in cache:
        return cache[key]
    rmap = felzenszwalb_segment(image, cfg.felz)
    if cache is not None:
        cache[key] = rmap
    return rmap


def pretrain_local(images: Sequence[Image], cfg: TrainConfig):
    """Region-level contrastive pretraining of a LocalUNet.

    Per step: segment the image, build an elastic positive view, sample
    per-region mean features from both views, and minimize the localized
    contrastive loss over surviving regions.  Images whose warps keep no
    region at all are skipped with a warning.  Returns
    (net, history, skipped_count).
    """
    if not images:
        raise ValueError("pretrain_local: empty image list")
    net = LocalUNet(feature_dim=cfg.feature_dim, seed=int(_rng(cfg.seed, _INIT_LOCAL).integers(2**31)))
    opt = Adam(lr=cfg.lr_local, beta1=cfg.momentum, weight_decay=cfg.weight_decay)
    order_rng = _rng(cfg.seed, _ORDER_LOCAL)
    params = net.parameters()
    cache: Optional[dict] = {} if cfg.cache_regions else None
    history = []
    skipped = 0
    step = 0
    for epoch in range(cfg.local_epochs):
        perm = order_rng.permutation(len(images))
        epoch_losses = []
        for i in perm:
            image = images[i]
            rmap = _regions_for(image, cfg, cache, int(i))
            eparams = replace(cfg.elastic, seed=cfg.seed ^ step)
            warped, warped_map, surviving = elastic_pair(image, rmap, eparams)
            if not surviving:
                logger.warning("pretrain_local: no surviving regions for image %d at step %d; skipped", i, step)
                skipped += 1
                step += 1
                continue
            with Tape() as tape:
                fq = forward_local(net, image)
                fp = forward_local(net, warped)
                ms_q = build_sample_mean_set(
                    fq, rmap, surviving, cfg.n_samples,
                    seed=_stream_seed(cfg.seed, _SAMPLE_Q, step),
                    normalize=cfg.normalize_local_means)
                ms_p = build_sample_mean_set(
                    fp, warped_map, surviving, cfg.n_samples,
                    seed=_stream_seed(cfg.seed, _SAMPLE_P, step),
                    normalize=cfg.normalize_local_means)
                loss = local_contrastive_loss(ms_q, ms_p, cfg.tau_local,
                                              include_self_term=not cfg.exclude_self_similarity)
            value = _check_loss(float(loss.data), "pretrain_local", step)
            tape.backward(loss)
            opt_step(opt, params, [tape.grad(p) for p in params])
            epoch_losses.append(value)
            step += 1
        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
        history.append(_history_row(epoch, mean_loss))
    return net, history, skipped


@dataclass
class DiceReport:
    """Hard-Dice evaluation: per-class scores and their mean."""

    per_class: dict
    mean: float


def evaluate_dice(model: FusionSegmenter, images: Sequence[Image],
                  labels: Sequence[np.ndarray]) -> DiceReport:
    """Aggregate hard Dice over a dataset.

    Predictions are per-pixel argmax.  For each class c present in
    predictions or ground truth, DSC_c = 2|P & G| / (|P| + |G|) using
    counts pooled over the whole dataset; classes absent from both sides
    are excluded from the mean.
    """
    if len(images) != len(labels):
        raise ValueError(f"evaluate_dice: {len(images)} images vs {len(labels)} label maps")
    c = model.n_classes
    inter = np.zeros(c, dtype=np.int64)
    pred_count = np.zeros(c, dtype=np.int64)
    true_count = np.zeros(c, dtype=np.int64)
    for image, lab in zip(images, labels):
        probs = model.forward(Tensor(image.data))  # no tape: inference only
        pred = np.argmax(probs.data, axis=-1)
        for cls in range(c):
            pm = pred == cls
            gm = lab == cls
            inter[cls] += int((pm & gm).sum())
            pred_count[cls] += int(pm.sum())
            true_count[cls] += int(gm.sum())
    per_class = {}
    for cls in range(c):
        denom = pred_count[cls] + true_count[cls]
        if denom == 0:
            continue  # class absent from both predictions and ground truth
        per_class[cls] = 2.0 * inter[cls] / denom
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return DiceReport(per_class=per_class, mean=mean)


def finetune(global_encoder: GlobalEncoder, local_net: LocalUNet,
             train_images: Sequence[Image], train_labels: Sequence[np.ndarray],
             val_images: Sequence[Image], val_labels: Sequence[np.ndarray],
             cfg: TrainConfig):
    """Dice-loss fine-tuning of the fused segmenter, end to end.

    The given encoder/U-Net weights are trained in place (clone first to
    keep pristine copies).  Returns (FusionSegmenter, history); history
    rows carry the epoch's mean training loss plus validation Dice.
    """
    if len(train_images) != len(train_labels):
        raise ValueError("finetune: train images and labels differ in length")
    if not train_images:
        raise ValueError("finetune: empty training set")
    for lab in list(train_labels) + list(val_labels):
        if lab.max() >= cfg.n_classes:
            raise ValueError(
                f"finetune: label {int(lab.max())} outside the configured "
                f"{cfg.n_classes} classes"
            )
    model = FusionSegmenter(global_encoder, local_net, n_classes=cfg.n_classes,
                            seed=int(_rng(cfg.seed, _INIT_FUSION).integers(2**31)))
    opt = Adam(lr=cfg.lr_finetune, beta1=cfg.momentum, weight_decay=cfg.weight_decay)
    order_rng = _rng(cfg.seed, _ORDER_FT)
    params = model.parameters()
    history = []
    step = 0
    for epoch in range(cfg.finetune_epochs):
        perm = order_rng.permutation(len(train_images))
        epoch_losses = []
        for i in perm:
            image, lab = train_images[i], train_labels[i]
            target = one_hot(lab, cfg.n_classes)
            with Tape() as tape:
                probs = model.forward(Tensor(image.data))
                loss = dice_loss(probs, target)
            value = _check_loss(float(loss.data), "finetune", step)
            tape.backward(loss)
            opt_step(opt, params, [tape.grad(p) for p in params])
            epoch_losses.append(value)
            step += 1
        if val_images:
            report = evaluate_dice(model, val_images, val_labels)
            dice_mean = report.mean
            dice_per_class = {str(k): v for k, v in report.per_class.items()}
        else:
            dice_mean, dice_per_class = None, None
        history.append(_history_row(epoch, float(np.mean(epoch_losses)),
                                    dice_mean, dice_per_class))
    return model, history
