"""Command-line entry point: ``robustbf {train,run,report}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from . import __version__
from . import experiments as ex
from .config import ConfigError, load_config


def _common(p):
    p.add_argument("--config", help="YAML config file (defaults if omitted)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out-dir", help="output directory")
    scale = p.add_mutually_exclusive_group()
    scale.add_argument("--desk-scale", dest="full_scale", action="store_false",
                       help="16 transmit antennas (default)")
    scale.add_argument("--full-scale", dest="full_scale", action="store_true",
                       help="32 transmit antennas")
    p.set_defaults(full_scale=False)


def build_parser():
    parser = argparse.ArgumentParser(prog="robustbf", description=__doc__)
    parser.add_argument("--version", action="version", version=f"robustbf {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="meta-train a parameter bank")
    _common(p)
    p.add_argument("--no-resume", dest="resume", action="store_false",
                   help="ignore existing checkpoints")

    p = sub.add_parser("run", help="run the configured experiment")
    _common(p)
    p.add_argument("--workers", type=int, help="parallel trial workers")
    p.add_argument("--bank", help="trained bank file for learned methods")
    p.add_argument("--train-first", action="store_true",
                   help="train a bank before evaluating when --bank is not given")

    p = sub.add_parser("report", help="summarize a result table")
    p.add_argument("table", help="results.csv written by 'run'")
    p.add_argument("-o", "--output", help="write the summary CSV here")
    return parser


def _load(args):
    cfg = load_config(args.config, full_scale=args.full_scale)
    if args.seed is not None:
        cfg.sampling.master_seed = int(args.seed)
    if args.out_dir is not None:
        cfg.experiment.out_dir = args.out_dir
    if getattr(args, "workers", None) is not None:
        cfg.experiment.workers = int(args.workers)
    if getattr(args, "train_first", False):
        cfg.experiment.train_first = True
    cfg.validate()
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            cfg = _load(args)

            def show(row):
                print(f"epoch {row['epoch']}: val_wsr={row['mean_val_wsr']:.4f} "
                      f"support_loss={row['mean_support_loss']:.4f} "
                      f"cosine={row['mean_pairwise_cosine']:.4f}", flush=True)

            ex.train(cfg, cfg.experiment.out_dir, resume=args.resume, progress=show)
            print(f"bank written to {cfg.experiment.out_dir}")
        elif args.command == "run":
            cfg = _load(args)
            rows = ex.run(cfg, bank_path=args.bank)
            print(f"{len(rows)} rows written to {cfg.experiment.out_dir}")
        else:
            summary = ex.report(args.table, args.output)
            w = sys.stdout
            w.write(",".join(ex.SUMMARY_COLUMNS) + "\n")
            for s in summary:
                w.write(f"{s['sweep_value']!r},{s['method']},{s['n']},{s['mean']:.6f},{s['std']:.6f}\n")
    except (ConfigError, ex.MissingBankError, ex.ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
