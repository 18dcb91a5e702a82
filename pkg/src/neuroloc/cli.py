"""Command-line entry point: ``neuroloc run|table|plotdata|slices``."""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from . import io as nio


def _cmd_run(args):
    cfg = harness.load_config(args.config)
    out = args.output_dir or cfg.output_dir

    def progress(row):
        err = row["localization_error_mm"]
        err = "-" if err is None else f"{err:.2f} mm"
        print(f"{row['method']:<10} p={row['p']:<5g} lambda={row['lambda']:<10.4g} "
              f"seed={row['seed']!s:<5} {row['status']:<6} {err}", flush=True)

    result = harness.run_experiment(cfg, output_dir=out, workers=args.workers,
                                    progress=None if args.quiet else progress)
    text, table_csv = harness.emit_table(result)
    Path(out, "table.txt").write_text(text)
    Path(out, "table.csv").write_text(table_csv)
    series, plot_csv = harness.emit_sweep_plotdata(result)
    Path(out, "plotdata.json").write_text(json.dumps(series, indent=2, sort_keys=True) + "\n")
    Path(out, "plotdata.csv").write_text(plot_csv)
    print(text, end="")
    failed = [r for r in result.rows if r["status"] != "ok"]
    for r in failed:
        print(f"FAILED {r['key']}: {r['status']}", file=sys.stderr)
    return 0 if not failed else 1


def _cmd_table(args):
    result = harness.SweepResult.load(args.results)
    text, table_csv = harness.emit_table(result)
    print(table_csv if args.csv else text, end="")
    return 0


def _cmd_plotdata(args):
    result = harness.SweepResult.load(args.results)
    series, plot_csv = harness.emit_sweep_plotdata(result)
    if args.format == "csv":
        out = plot_csv
    else:
        out = json.dumps(series, indent=2, sort_keys=True) + "\n"
    if args.output:
        Path(args.output).write_text(out)
    else:
        print(out, end="")
    return 0


def _cmd_slices(args):
    results_path = Path(args.results)
    result = harness.SweepResult.load(results_path)
    matches = [r for r in result.rows
               if r["method"] == args.method and r["status"] == "ok"
               and abs(r["lambda"] - args.lam) <= 1e-12 * max(1.0, abs(args.lam))
               and (args.p is None or r["p"] == args.p)
               and (args.seed is None or r["seed"] == args.seed)]
    if not matches:
        print(f"no successful cell for method={args.method} lambda={args.lam}", file=sys.stderr)
        return 1
    row = matches[0]
    cfg = harness.ExperimentConfig.from_dict(result.config)
    space, truth = harness.build_truth(cfg)
    cell_dir = results_path.parent / "cells" / result.config_hash
    est = nio.load_estimate(cell_dir / row["estimate"])
    slices = harness.emit_slices(est, space, truth)
    out_dir = args.output_dir or results_path.parent / "slices"
    written = harness.write_slices(slices, out_dir, prefix=row["key"])
    for p in written:
        print(p)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="neuroloc", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a lambda/p sweep from a TOML config")
    run.add_argument("config", help="config.toml, config.json or builtin:<name>")
    run.add_argument("--output-dir", help="override the config's output_dir")
    run.add_argument("--workers", type=int, default=None,
                     help=f"worker processes (default: ${harness.WORKERS_ENV} or 1)")
    run.add_argument("-q", "--quiet", action="store_true")
    run.set_defaults(func=_cmd_run)

    tab = sub.add_parser("table", help="best-lambda table from results.json")
    tab.add_argument("results")
    tab.add_argument("--csv", action="store_true")
    tab.set_defaults(func=_cmd_table)

    plot = sub.add_parser("plotdata", help="error-vs-lambda series from results.json")
    plot.add_argument("results")
    plot.add_argument("--format", choices=("json", "csv"), default="json")
    plot.add_argument("-o", "--output")
    plot.set_defaults(func=_cmd_plotdata)

    sl = sub.add_parser("slices", help="amplitude planes through the argmax of one cell")
    sl.add_argument("results")
    sl.add_argument("--method", required=True, choices=harness.METHODS)
    sl.add_argument("--lambda", dest="lam", type=float, required=True)
    sl.add_argument("--p", type=float, default=None)
    sl.add_argument("--seed", type=int, default=None)
    sl.add_argument("--output-dir")
    sl.set_defaults(func=_cmd_slices)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"neuroloc: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
