"""Command-line entry point: ``gpbackoff {generate,fit,backoff,evaluate,reproduce}``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import PROFILES, ExperimentConfig


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config file (keys override defaults)")
    common.add_argument("--seed", type=int, help="master seed (also used for the dataset)")
    common.add_argument("--workers", type=int, help="worker processes for Monte Carlo samples and episodes")
    common.add_argument("--profile", choices=sorted(PROFILES), default="desk",
                        help="desk: S=200, n_b=8; paper: S=1000, n_b=16")
    common.add_argument("--output-dir", help="directory for all artifacts")
    common.add_argument("--allow-nonconverged", action="store_true",
                        help="exit 0 even when the back-off bisection does not converge")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gpbackoff", description="Back-off GP NMPC experiments", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a Sobol dataset from the plant")
    f = sub.add_parser("fit", parents=[common], help="fit the GP state-space model")
    f.add_argument("--dataset", metavar="CSV")
    b = sub.add_parser("backoff", parents=[common], help="compute back-offs by bisection")
    b.add_argument("--model", metavar="JSON")
    e = sub.add_parser("evaluate", parents=[common], help="closed-loop runs on the plant")
    e.add_argument("--model", metavar="JSON")
    e.add_argument("--backoffs", metavar="CSV")
    e.add_argument("--name", default="gp", help="variant label in the summary")
    r = sub.add_parser("reproduce", parents=[common], help="full pipeline for one named variant")
    r.add_argument("variant", choices=sorted(pipeline.VARIANTS))
    return p


def _config(args) -> ExperimentConfig:
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
        over["dataset"] = {"seed": args.seed}
    if args.workers is not None:
        over["workers"] = args.workers
    if args.output_dir is not None:
        over["output_dir"] = args.output_dir
    return ExperimentConfig.load(args.config, args.profile, over)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    cfg = _config(args)
    try:
        if args.command == "generate":
            csv_path, _ = pipeline.cmd_generate(cfg)
            print(csv_path)
        elif args.command == "fit":
            print(pipeline.cmd_fit(cfg, args.dataset))
        elif args.command == "backoff":
            report = pipeline.cmd_backoff(cfg, args.model)
            return _finish(report, args.allow_nonconverged)
        elif args.command == "evaluate":
            pipeline.cmd_evaluate(cfg, args.model, args.backoffs, args.name)
        elif args.command == "reproduce":
            report, _ = pipeline.cmd_reproduce(cfg, args.variant)
            return _finish(report, args.allow_nonconverged)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def _finish(report, allow: bool) -> int:
    print(f"gamma={report.table.gamma:.6g} beta_hat={report.beta_hat:.4f} beta_lb={report.beta_lb:.4f} "
          f"converged={report.converged}")
    if report.converged or allow:
        return 0
    print("back-off bisection did not converge (use --allow-nonconverged to accept)", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
