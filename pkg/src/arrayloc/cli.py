"""Command-line entry point.

Subcommands: design-bf, simulate, featurize, train, infer, eval, trend.
All take --config (YAML; defaults apply when omitted) and --seed to
override the config seed. Each run writes a run_<command>.json manifest
with the config hash and artifact checksums.
"""

from __future__ import annotations

import argparse
import sys

from .config import PipelineConfig, load_config
from . import pipeline


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arrayloc",
                                     description=__doc__.split("\n")[0])
    parser.add_argument("--config", help="pipeline YAML config")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--front-end", choices=("mono", "stereo", "raw16", "beamformed"),
                        help="override the configured front end")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("design-bf", help="design beamformer weights")
    p.add_argument("--out", required=True, help="weight file to write")

    p = sub.add_parser("simulate", help="render the synthetic benchmark scenes")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("featurize", help="extract per-frame log-mel stacks")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--weights", help="beamformer weight file (designed on the fly "
                                     "when omitted)")

    p = sub.add_parser("train", help="train the detection/localization network")
    p.add_argument("--features", required=True, help="featurize output directory")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("infer", help="predict per-frame position and confidence")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--features", required=True, help="featurize output directory")
    p.add_argument("--out", required=True, help="detections CSV to write")
    p.add_argument("--smooth", type=float, metavar="SIGMA",
                   help="Gaussian temporal smoothing in frames")

    p = sub.add_parser("eval", help="score detections against labels")
    p.add_argument("--detections", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="report file to write")
    p.add_argument("--tolerance-deg", type=float,
                   help="additional tolerance to report (2 and 5 are built in)")

    p = sub.add_parser("trend", help="run all front ends and tabulate metrics")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--manifest", help="reuse existing scenes instead of simulating")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.front_end is not None:
            overrides["front_end"] = args.front_end
        if overrides:
            cfg = cfg.with_overrides(**overrides)

        if args.command == "design-bf":
            design = pipeline.design_cmd(cfg, args.out)
            flagged = int(design.flagged.sum())
            print(f"wrote {args.out}: {design.n_bins} bins x {design.n_dirs} "
                  f"directions ({flagged} flagged)")
        elif args.command == "simulate":
            manifest = pipeline.simulate_cmd(cfg, args.out_dir)
            print(f"wrote {manifest}")
        elif args.command == "featurize":
            pipeline.featurize_cmd(cfg, args.manifest, args.out_dir,
                                   weights_path=args.weights)
            print(f"wrote features to {args.out_dir}")
        elif args.command == "train":
            _, history = pipeline.train_cmd(cfg, args.features, args.out_dir,
                                            log=lambda e, l: print(f"epoch {e}: {l:.6f}"))
            print(f"final mean loss {history[-1]:.6f}")
        elif args.command == "infer":
            dets = pipeline.infer_cmd(cfg, args.model, args.features, args.out,
                                      smooth_sigma=args.smooth)
            print(f"wrote {len(dets)} detections to {args.out}")
        elif args.command == "eval":
            report = pipeline.eval_cmd(cfg, args.detections, args.manifest,
                                       args.out, tolerance_deg=args.tolerance_deg)
            print(f"AP@2deg={report.ap_at_2deg:.4f} AP@5deg={report.ap_at_5deg:.4f} "
                  f"aD={report.ad_px:.1f}px cls_acc={report.cls_accuracy:.4f}")
        elif args.command == "trend":
            reports = pipeline.trend_cmd(cfg, args.out_dir,
                                         manifest_path=args.manifest, log=print)
            for fe, r in reports.items():
                print(f"{fe}: AP@2deg={r.ap_at_2deg:.4f} aD={r.ad_px:.1f}px")
    except Exception as e:  # noqa: BLE001 - single CLI failure funnel
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
