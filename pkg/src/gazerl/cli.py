"""Command-line entry points: run / compare / ablate / render-heatmaps.

Exit codes: 0 success, 2 configuration problem, 3 training diverged
(non-finite loss).  Anything else propagates as a traceback.
"""

import argparse
import sys

from .config import ABLATION_AXES, ConfigError, ExperimentConfig, apply_overrides, \
    load_config, parse_scalar
from .rl import TrainingDiverged


def _add_config_args(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override one config field")


def _build_config(args):
    if args.config:
        return load_config(args.config, args.overrides)
    return apply_overrides(ExperimentConfig(), args.overrides).validate()


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gazerl", description="train and inspect gaze-attention PPO agents")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one configuration")
    _add_config_args(p)

    p = sub.add_parser("compare", help="sample-efficiency table over run dirs")
    p.add_argument("run_dirs", nargs="+")

    p = sub.add_parser("ablate", help="sweep one axis, then compare the runs")
    _add_config_args(p)
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.add_argument("--values", required=True,
                   help="comma-separated list, e.g. 0.05,0.1,0.25,0.5")

    p = sub.add_parser("render-heatmaps", help="replay a run's attention maps")
    p.add_argument("run_dir")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    from . import harness

    try:
        if args.command == "run":
            out_dir = harness.run(_build_config(args))
            print(f"run complete: {out_dir}")
        elif args.command == "compare":
            print(harness.format_compare_table(harness.compare(args.run_dirs)))
        elif args.command == "ablate":
            values = [parse_scalar(v) for v in args.values.split(",")]
            results, failures = harness.ablate(_build_config(args), args.axis, values)
            if results:
                print(harness.format_compare_table(results))
            for sub_dir, msg in failures:
                print(f"FAILED {sub_dir}: {msg}", file=sys.stderr)
            if failures and not results:
                return 1
        elif args.command == "render-heatmaps":
            written = harness.render_heatmaps(args.run_dir, n_frames=args.frames,
                                              out_dir=args.out, seed=args.seed)
            print(f"wrote {len(written)} frames")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
