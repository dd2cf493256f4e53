"""Command-line entry point.

Subcommands: synth, magnify, fit-ssi, train, evaluate, pipeline. One JSON
config document (--config) drives every stage; --seed, --model and
--profile override the corresponding config keys. The environment variable
SKINTEMP_THREADS caps the numeric-library thread count (it is applied
before numpy is imported and affects nothing else).
"""

from __future__ import annotations

import argparse
import os
import sys


def _apply_thread_env() -> None:
    threads = os.environ.get("SKINTEMP_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skintemp",
        description="Skin-temperature regression from video: synthesis, "
        "magnification, calibration, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (defaults: desk preset)")
        p.add_argument("--out", required=True, help="run output directory")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--model", choices=["nisdl1", "nisdl2", "dl", "nipst"],
                       help="model variant")
        p.add_argument("--profile", choices=["paper", "desk"], help="scale profile")
        return p

    common(sub.add_parser("synth", help="generate the synthetic dataset"))

    p = common(sub.add_parser("magnify", help="magnify clips (all subjects, or one manifest)"))
    p.add_argument("--manifest", help="magnify a single clip manifest into --out")

    common(sub.add_parser("fit-ssi", help="interpolate labels and fit sensitivity indices"))

    common(sub.add_parser("train", help="train one network variant"))

    p = common(sub.add_parser("evaluate", help="score a model on the held-out test subjects"))
    p.add_argument("--checkpoint", help="checkpoint file (default: models/<variant>/model.stck)")

    common(sub.add_parser("pipeline", help="run every stage end to end"))
    return parser


def _resolve_config(args):
    from .config import RunConfig, load_config

    cfg = load_config(args.config) if args.config else RunConfig.desk_default()
    return cfg.with_overrides(seed=args.seed, variant=args.model, profile=args.profile)


def _dispatch(args) -> int:
    from . import pipeline as pl

    cfg = _resolve_config(args)
    out = args.out
    if args.command == "synth":
        sids = pl.run_synth(cfg, out)
        print(f"synthesized {len(sids)} subjects under {out}/synth")
    elif args.command == "magnify":
        if args.manifest:
            path = pl.magnify_one_clip(args.manifest, cfg, out)
            print(f"magnified clip -> {path}")
        else:
            sids = pl.run_magnify(cfg, out)
            print(f"magnified {len(sids)} subject clips under {out}/magnified")
    elif args.command == "fit-ssi":
        records = pl.run_fit_ssi(cfg, out)
        for sid, rec in sorted(records["full"].items()):
            print(f"{sid}: k={rec.k:.3f} b={rec.b:.3f} rmse={rec.residual_rmse:.4f}")
    elif args.command == "train":
        variant = cfg.model.variant
        result = pl.run_train(cfg, out, variant)
        last = result.checkpoint_log[-1].val_mae_c if result.checkpoint_log else float("nan")
        print(f"trained {variant}: final checkpoint {result.final_path} "
              f"(last val MAE {last:.4f} degC)")
    elif args.command == "evaluate":
        variant = cfg.model.variant
        report = pl.run_evaluate(cfg, out, variant, checkpoint=args.checkpoint)
        print(f"{variant}: n={report.n} mean={report.mean_c:.4f} "
              f"median={report.median_c:.4f} degC")
    elif args.command == "pipeline":
        reports = pl.run_pipeline(cfg, out)
        for variant, report in sorted(reports.items()):
            print(f"{variant}: mean={report.mean_c:.4f} median={report.median_c:.4f} "
                  f"degC over {report.n} frames")
    return 0


def main(argv=None) -> int:
    _apply_thread_env()
    args = build_parser().parse_args(argv)
    from .errors import SkinTempError

    try:
        return _dispatch(args)
    except (SkinTempError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
