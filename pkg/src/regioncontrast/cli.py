"""Command-line interface.

Exit codes: 0 success, 1 usage error (bad flags, bad config), 2 runtime
failure while executing a valid command.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import load_model_checkpoint, save_model_checkpoint
from .clustering import kmeans, cluster_purity, subsample_points
from .config import RunConfig, load_run_config
from .elastic import elastic_pair
from .experiments import ablate_n_samples, dataset_slices
from .felzenszwalb import felzenszwalb_segment
from .images import Image
from .netpbm import read_pgm, write_pgm, write_region_pgm
from .networks import forward_local
from .overlay import render_overlay
from .phantoms import gen_phantom
from .training import (evaluate_dice, finetune, pretrain_global,
                       pretrain_local, write_history_jsonl)

__all__ = ["main", "build_parser"]

logger = logging.getLogger(__name__)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; our contract wants 1
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="JSON run configuration (defaults used if omitted)")
    common.add_argument("--seed", type=int, default=None,
                        help="override the configured seed")
    common.add_argument("--out", type=Path, default=Path("out"),
                        help="output directory (created if missing)")

    parser = _Parser(prog="regioncontrast",
                     description="Region-contrastive pretraining on synthetic phantoms")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", parents=[common], help="segment one image into regions")
    p.add_argument("--image", type=Path, default=None,
                   help="input PGM (default: phantom 0 from the config)")

    sub.add_parser("pretrain-global", parents=[common],
                   help="contrastive pretraining of the global encoder")
    sub.add_parser("pretrain-local", parents=[common],
                   help="region-contrastive pretraining of the local U-Net")

    p = sub.add_parser("finetune", parents=[common], help="Dice fine-tuning of the fused segmenter")
    p.add_argument("--global-ckpt", type=Path, default=None)
    p.add_argument("--local-ckpt", type=Path, default=None)

    p = sub.add_parser("eval", parents=[common], help="evaluate a fused segmenter checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("cluster", parents=[common],
                       help="K-Means on pretrained per-pixel features")
    p.add_argument("--checkpoint", type=Path, required=True, help="local U-Net checkpoint")
    p.add_argument("--image", type=Path, default=None,
                   help="input PGM (default: phantom 0 from the config)")

    p = sub.add_parser("gen-data", parents=[common], help="write the phantom corpus to disk")
    p.add_argument("--count", type=int, default=None,
                   help="number of images (default: config data.count)")

    sub.add_parser("ablate-n", parents=[common],
                   help="rerun the pipeline for N in {10, 50, 100}")
    return parser


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _input_image(args, cfg: RunConfig) -> Image:
    if args.image is not None:
        return Image(read_pgm(args.image))
    img, _ = gen_phantom(cfg.phantom, 0)
    return img


def _cmd_segment(args, cfg: RunConfig, out: Path) -> int:
    image = _input_image(args, cfg)
    rmap = felzenszwalb_segment(image, cfg.train.felz)
    write_pgm(out / "input.pgm", image.gray(), maxval=255)
    write_region_pgm(out / "regions.pgm", rmap.labels)
    render_overlay(image, rmap.labels, out / "overlay.ppm")
    print(f"segmented into {rmap.region_count} regions -> {out}")
    return 0


def _cmd_pretrain_global(args, cfg: RunConfig, out: Path) -> int:
    images, _, _ = dataset_slices(cfg)
    net, history = pretrain_global(images, cfg.train)
    save_model_checkpoint(out / "global.ckpt", "global", net, cfg.to_dict())
    write_history_jsonl(out / "global_history.jsonl", history)
    print(f"pretrained global encoder: final loss {history[-1]['loss']:.4f} -> {out}")
    return 0


def _cmd_pretrain_local(args, cfg: RunConfig, out: Path) -> int:
    images, _, _ = dataset_slices(cfg)
    net, history, skipped = pretrain_local(images, cfg.train)
    save_model_checkpoint(out / "local.ckpt", "local", net, cfg.to_dict())
    write_history_jsonl(out / "local_history.jsonl", history)
    print(f"pretrained local U-Net: final loss {history[-1]['loss']:.4f}, "
          f"{skipped} skipped image(s) -> {out}")
    return 0


def _cmd_finetune(args, cfg: RunConfig, out: Path) -> int:
    images, (ft_i, ft_l), (val_i, val_l) = dataset_slices(cfg)
    if args.global_ckpt:
        genc, _ = load_model_checkpoint(args.global_ckpt)
    else:
        logger.info("no --global-ckpt given; pretraining the global encoder now")
        genc, _ = pretrain_global(images, cfg.train)
    if args.local_ckpt:
        local, _ = load_model_checkpoint(args.local_ckpt)
    else:
        logger.info("no --local-ckpt given; pretraining the local U-Net now")
        local, _, _ = pretrain_local(images, cfg.train)
    model, history = finetune(genc, local, ft_i, ft_l, val_i, val_l, cfg.train)
    save_model_checkpoint(out / "fusion.ckpt", "fusion", model, cfg.to_dict())
    write_history_jsonl(out / "finetune_history.jsonl", history)
    print(f"fine-tuned: val dice {history[-1]['dice_mean']:.4f} -> {out}")
    return 0


def _cmd_eval(args, cfg: RunConfig, out: Path) -> int:
    model, meta = load_model_checkpoint(args.checkpoint)
    if meta.get("model_kind") != "fusion":
        raise ValueError(f"eval needs a 'fusion' checkpoint, got '{meta.get('model_kind')}'")
    _, _, (val_i, val_l) = dataset_slices(cfg)
    report = evaluate_dice(model, val_i, val_l)
    payload = {"dice_mean": report.mean,
               "dice_per_class": {str(k): v for k, v in report.per_class.items()}}
    (out / "eval.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(json.dumps(payload, indent=2))
    return 0


def _cmd_cluster(args, cfg: RunConfig, out: Path) -> int:
    model, meta = load_model_checkpoint(args.checkpoint)
    if meta.get("model_kind") != "local":
        raise ValueError(f"cluster needs a 'local' checkpoint, got '{meta.get('model_kind')}'")
    image = _input_image(args, cfg)
    rmap = felzenszwalb_segment(image, cfg.train.felz)
    fmap = forward_local(model, image)
    points = fmap.data.reshape(-1, fmap.data.shape[2])
    ref = rmap.labels.ravel()
    if points.shape[0] > 4096:
        keep = subsample_points(np.arange(points.shape[0])[:, None], 4096,
                                seed=cfg.train.seed)[:, 0]
    else:
        keep = np.arange(points.shape[0])
    k = rmap.region_count  # cluster count mirrors the region proposal
    km = kmeans(points[keep], k, seed=cfg.train.seed)
    score = cluster_purity(km.assignments, ref[keep])
    # full-image assignment map for the overlay: nearest centroid per pixel
    d2 = ((points[:, None, :] - km.centroids[None, :, :]) ** 2).sum(axis=2)
    full = d2.argmin(axis=1).reshape(rmap.labels.shape)
    render_overlay(image, full, out / "clusters_overlay.ppm")
    payload = {"k": int(k), "purity_vs_regions": score, "inertia": km.inertia,
               "n_iter": km.n_iter}
    (out / "cluster.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(json.dumps(payload, indent=2))
    return 0


def _cmd_gen_data(args, cfg: RunConfig, out: Path) -> int:
    count = args.count if args.count is not None else cfg.data.count
    for i in range(count):
        img, lab = gen_phantom(cfg.phantom, i)
        write_pgm(out / f"image_{i:04d}.pgm", img.gray(), maxval=255)
        write_region_pgm(out / f"labels_{i:04d}.pgm", lab)
    print(f"wrote {count} phantom image/label pairs -> {out}")
    return 0


def _cmd_ablate_n(args, cfg: RunConfig, out: Path) -> int:
    result = ablate_n_samples(cfg)
    (out / "ablate_n.json").write_text(json.dumps(result, indent=2) + "\n")
    print(json.dumps(result, indent=2))
    return 0


_COMMANDS = {
    "segment": _cmd_segment,
    "pretrain-global": _cmd_pretrain_global,
    "pretrain-local": _cmd_pretrain_local,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "cluster": _cmd_cluster,
    "gen-data": _cmd_gen_data,
    "ablate-n": _cmd_ablate_n,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load_config(args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    try:
        return _COMMANDS[args.command](args, cfg, out)
    except Exception as e:  # runtime failure of a valid command
        logger.error("%s failed: %s", args.command, e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
