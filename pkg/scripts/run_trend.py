#!/usr/bin/env python3
"""Front-end comparison: mono / stereo / raw16 / beamformed-15 (plus the
temporally smoothed beamformed row) trained on a shared benchmark.

Usage: python scripts/run_trend.py --out-dir runs/trend [--seed 0]
"""

import argparse
import os

from arrayloc.benchmarks import trend_benchmark_config
from arrayloc import pipeline
from arrayloc.config import save_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out-dir", required=True)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = trend_benchmark_config(seed=args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    save_config(os.path.join(args.out_dir, "config.yaml"), cfg)
    reports = pipeline.trend_cmd(cfg, args.out_dir, log=print)
    print(open(os.path.join(args.out_dir, "trend_table.txt")).read())
    order = [reports[fe].ap_at_2deg for fe in ("mono", "stereo", "raw16", "beamformed")]
    print("AP@2deg ordering mono<stereo<raw16<beamformed:",
          all(a < b for a, b in zip(order, order[1:])))


if __name__ == "__main__":
    main()
