"""Command-line entry point: pretrain, finetune, sweep, report.

Examples:

    gfz pretrain --config exp.cfg --out runs/pretrained.gfzc
    gfz finetune --config exp.cfg --checkpoint runs/pretrained.gfzc \
        --strategy gfz-l --seed 101 --seed 202 --out runs/exp1
    gfz sweep --config exp.cfg --checkpoint runs/pretrained.gfzc \
        --axis eps_cond --out runs/sweep_cond
    gfz report --run-dir runs/exp1

GFZ_THREADS caps how many seed runs / grid points execute in parallel.
"""

from __future__ import annotations

import argparse
import sys

from .config import STRATEGY_NAMES, default_config, load_config
from .harness import SWEEP_AXES, cmd_finetune, cmd_pretrain, cmd_report, cmd_sweep
from .nn import ConfigError


def _add_config_arg(parser):
    parser.add_argument("--config", metavar="PATH", default=None,
                        help="flat key=value config file (defaults used when omitted)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gfz",
                                     description="Gradual-freezing fine-tuning experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the source-task backbone and save a checkpoint")
    _add_config_arg(p)
    p.add_argument("--out", metavar="PATH", required=True, help="checkpoint output path (.gfzc)")

    p = sub.add_parser("finetune", help="fine-tune a checkpoint with one strategy")
    _add_config_arg(p)
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.add_argument("--strategy", choices=STRATEGY_NAMES, default=None,
                   help="override the config strategy")
    p.add_argument("--seed", metavar="N", type=int, action="append", default=None,
                   help="repeatable; overrides the config seed list")
    p.add_argument("--out", metavar="DIR", required=True)

    p = sub.add_parser("sweep", help="ablate one schedule parameter over a grid")
    _add_config_arg(p)
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.add_argument("--axis", choices=sorted(SWEEP_AXES), required=True)
    p.add_argument("--values", metavar="V", type=float, nargs="+", default=None,
                   help="override the default grid")
    p.add_argument("--out", metavar="DIR", required=True)

    p = sub.add_parser("report", help="aggregate finetune outputs into report artifacts")
    p.add_argument("--run-dir", metavar="DIR", required=True)
    p.add_argument("--out", metavar="DIR", default=None)
    return parser


def _load(args):
    return load_config(args.config) if args.config else default_config()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "pretrain":
            summary = cmd_pretrain(_load(args), args.out)
            print(f"pretrained {summary['epochs']} epochs, "
                  f"val mAP {100 * summary['final_val_map']:.2f}%, "
                  f"test mAP {100 * summary['test_map']:.2f}% -> {summary['checkpoint']}")
        elif args.command == "finetune":
            summary = cmd_finetune(_load(args), args.checkpoint, args.out,
                                   strategy=args.strategy, seeds=args.seed)
            print(f"{summary['strategy']}: final val mAP "
                  f"{100 * summary['final_val_map_mean']:.2f}% "
                  f"+/- {100 * summary['final_val_map_std']:.2f} over seeds {summary['seeds']}")
        elif args.command == "sweep":
            values = args.values
            if values is not None and args.axis in ("eps_cond", "eps_step"):
                values = [int(v) for v in values]
            rows = cmd_sweep(_load(args), args.checkpoint, args.axis, args.out, values=values)
            for row in rows:
                print(f"{row['axis']}={row['value']}: mAP "
                      f"{100 * row['map_mean']:.2f}% +/- {100 * row['map_std']:.2f}")
        elif args.command == "report":
            info = cmd_report(args.run_dir, args.out)
            print(f"report for {', '.join(info['strategies'])} -> {info['out_dir']}")
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
