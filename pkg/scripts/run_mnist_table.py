#!/usr/bin/env python3
"""Train MNIST presets over their seed lists and print a test-accuracy table.

By default runs the four accuracy-comparison presets; pass config paths to
run a different set (e.g. the private-labels quartet).  Several minutes per
preset.
"""

import argparse
import math
from pathlib import Path

from vflsim.config import load_config
from vflsim.runner import run_matrix

REPO = Path(__file__).resolve().parents[1]
DEFAULT = (
    "mnist_svfl.ini",
    "mnist_efvfl_topk10.ini",
    "mnist_efvfl_topk1.ini",
    "mnist_cvfl_topk1.ini",
)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("configs", nargs="*",
                        help="preset files (default: the accuracy-table four)")
    parser.add_argument("--out", type=Path, default=None,
                        help="write per-seed traces/summaries under OUT/<preset>/")
    parser.add_argument("--seeds", type=int, default=None,
                        help="run seeds 0..N-1 instead of each preset's own list")
    args = parser.parse_args()
    paths = [Path(p) for p in args.configs] or [REPO / "configs" / n for n in DEFAULT]

    header = (f"{'preset':<28} {'seeds':>5} {'test acc':>17} "
              f"{'final loss':>11} {'uplink bits':>12}")
    print(header)
    print("-" * len(header))
    for path in paths:
        cfg = load_config(path)
        if cfg.dataset == "mnist" and not Path(cfg.mnist_path).exists():
            fallback = REPO / cfg.mnist_path  # allow running from anywhere
            if fallback.exists():
                cfg.mnist_path = str(fallback)
        seeds = range(args.seeds) if args.seeds is not None else None
        out = args.out / path.stem if args.out else None
        agg = run_matrix(cfg, seeds=seeds, out_dir=out)
        m = agg["metrics"]
        acc = m.get("test_acc", {"mean": math.nan, "std": math.nan})
        loss = m.get("final_loss", {"mean": math.nan})
        up = m.get("uplink_bits_total", {"mean": 0})
        note = f"  ({len(agg['failed'])} diverged)" if agg["failed"] else ""
        print(f"{path.stem:<28} {len(agg['runs']):>5} "
              f"{acc['mean']:>9.4f} +/- {acc['std']:.4f} "
              f"{loss['mean']:>11.4g} {up['mean']:>12.3e}{note}", flush=True)


if __name__ == "__main__":
    main()
