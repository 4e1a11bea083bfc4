#!/usr/bin/env python3
"""Paired comparison: fine-tuning from pretrained vs random initialization.

Pretrains both branches once on the unlabeled window, then for each seed
fine-tunes (a) the pretrained weights and (b) a fresh random init with the
identical fine-tuning seed, reporting held-out Dice for both arms and the
mean paired gain.
"""

import argparse
import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from regioncontrast.config import RunConfig, load_run_config
from regioncontrast.experiments import finetune_gain


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path, default=None, help="JSON run config")
    ap.add_argument("--seeds", type=str, default="0,1,2,3,4")
    ap.add_argument("--min-gain", type=float, default=0.02,
                    help="required mean Dice advantage of the pretrained arm")
    ap.add_argument("--json-out", type=Path, default=None)
    args = ap.parse_args()

    cfg = load_run_config(args.config) if args.config else RunConfig()
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]

    t0 = time.time()
    pairs = finetune_gain(cfg, seeds)
    rows = []
    for p in pairs:
        row = {"seed": p.seed, "dice_pretrained": round(p.dice_pretrained, 4),
               "dice_random": round(p.dice_random, 4),
               "gain": round(p.dice_pretrained - p.dice_random, 4)}
        rows.append(row)
        print(json.dumps(row), flush=True)

    mean_pre = sum(p.dice_pretrained for p in pairs) / len(pairs)
    mean_rand = sum(p.dice_random for p in pairs) / len(pairs)
    summary = {"mean_pretrained": round(mean_pre, 4),
               "mean_random": round(mean_rand, 4),
               "mean_gain": round(mean_pre - mean_rand, 4),
               "secs": round(time.time() - t0, 1)}
    print(json.dumps(summary))
    if args.json_out:
        args.json_out.write_text(
            "\n".join(json.dumps(r) for r in rows + [summary]) + "\n")
    return 0 if mean_pre - mean_rand >= args.min_gain else 1


if __name__ == "__main__":
    sys.exit(main())
