"""Command-line entry points.

Verbs:
  run        train a full continual experiment from a JSON config
  gradcheck  compare analytic gradients against finite differences
  oracle     cross-check matching / panoptic counting against brute force
  gen-data   write a synthetic dataset directory
  plot       regenerate curves.svg from one or more run directories
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import plots, runner
from .synthdata import SceneGeometry, generate_dataset, make_palette, write_dataset


def _cmd_run(args) -> int:
    config = runner.load_config(args.config)
    if args.output_dir is not None:
        config.output_dir = args.output_dir
    summary = runner.run_experiment(config)
    print("results written to %s" % config.output_dir)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _cmd_gradcheck(args) -> int:
    config = runner.load_config(args.config) if args.config \
        else runner.ExperimentConfig()
    report = runner.gradcheck(config, probes=args.probes, seed=args.seed)
    for name, entry in sorted(report["components"].items()):
        if entry.get("inactive"):
            print("%-18s inactive" % name)
        else:
            print("%-18s max rel err %.3e over %d probes"
                  % (name, entry["max_rel_err"], entry["probes"]))
    print("frozen-model grad %.1f" % report["old_model_grad"])
    print("gradcheck %s (worst %.3e, tolerance %.0e)"
          % ("PASS" if report["passed"] else "FAIL",
             report["max_rel_err"], runner.GRAD_TOLERANCE))
    return 0 if report["passed"] else 1


def _cmd_oracle(args) -> int:
    report = runner.oracle(args.subject, trials=args.trials, seed=args.seed)
    print("oracle %s: %d/%d agree -> %s"
          % (report["subject"], report["trials"] - len(report["failures"]),
             report["trials"], "PASS" if report["passed"] else "FAIL"))
    for failure in report["failures"][:10]:
        print("  disagreement: %s" % json.dumps(failure, sort_keys=True))
    return 0 if report["passed"] else 1


def _cmd_gen_data(args) -> int:
    palette = make_palette(args.classes, args.things)
    geometry = SceneGeometry(height=args.grid, width=args.grid)
    splits = {
        "train": generate_dataset(palette, args.samples, geometry, args.seed),
        "test": generate_dataset(palette, max(args.samples // 2, 1), geometry,
                                 args.seed + 1),
    }
    write_dataset(args.out, palette, splits, geometry, args.seed)
    counts = {name: len(samples) for name, samples in splits.items()}
    print("wrote %s (%s)" % (args.out,
                             ", ".join("%s=%d" % kv for kv in sorted(counts.items()))))
    return 0


def _cmd_plot(args) -> int:
    series = plots.collect_series(args.source)
    out = args.out or str(Path(args.source) / "curves.svg")
    plots.plot_curves(series, out)
    print("wrote %s (%d series)" % (out, len(series)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contseg",
                                     description="continual mask-classification "
                                                 "segmentation experiments")
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="train a continual experiment")
    p_run.add_argument("--config", required=True, help="JSON experiment config")
    p_run.add_argument("--output-dir", default=None,
                       help="override the config's output directory")
    p_run.set_defaults(fn=_cmd_run)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p_grad.add_argument("--probes", type=int, default=40,
                        help="parameter entries probed per loss component")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--config", default=None,
                        help="optional JSON config (defaults otherwise)")
    p_grad.set_defaults(fn=_cmd_gradcheck)

    p_oracle = sub.add_parser("oracle", help="brute-force cross-checks")
    p_oracle.add_argument("subject", choices=("match", "pq"))
    p_oracle.add_argument("--trials", type=int, default=200)
    p_oracle.add_argument("--seed", type=int, default=0)
    p_oracle.set_defaults(fn=_cmd_oracle)

    p_gen = sub.add_parser("gen-data", help="write a synthetic dataset")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.add_argument("--classes", type=int, default=8)
    p_gen.add_argument("--things", type=int, default=4)
    p_gen.add_argument("--grid", type=int, default=16)
    p_gen.add_argument("--samples", type=int, default=6,
                       help="training samples per class")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.set_defaults(fn=_cmd_gen_data)

    p_plot = sub.add_parser("plot", help="redraw curves from run directories")
    p_plot.add_argument("--from", dest="source", required=True,
                        help="run directory, or a directory of runs")
    p_plot.add_argument("--out", default=None, help="output SVG path")
    p_plot.set_defaults(fn=_cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
