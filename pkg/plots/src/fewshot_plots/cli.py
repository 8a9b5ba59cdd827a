"""Standalone plotting scripts over the evaluator's CSV files."""

from __future__ import annotations

import argparse
import sys

from .io import PlotDataError, read_ablation, read_curve, read_training_log
from .render import render_ablation, render_curve, render_training


def main_curve(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plot-curve",
        description="Accuracy-vs-shots or accuracy-vs-ways figure from "
                    "curve CSVs (one labeled line per input file)")
    parser.add_argument("--in", dest="inputs", action="append", required=True,
                        metavar="FILE", help="curve CSV; repeatable")
    parser.add_argument("--kind", choices=("shots", "ways"), required=True)
    parser.add_argument("--out", required=True, help="output PNG path")
    args = parser.parse_args(argv)
    try:
        curves = [read_curve(path) for path in args.inputs]
        render_curve(curves, args.kind, args.out)
    except (PlotDataError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"plot-curve: wrote {args.out}")
    return 0


def main_ablation(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plot-ablation",
        description="Grouped bar chart with CI error bars from an ablation CSV")
    parser.add_argument("--in", dest="input", required=True, metavar="FILE")
    parser.add_argument("--out", required=True, help="output PNG path")
    args = parser.parse_args(argv)
    try:
        render_ablation(read_ablation(args.input), args.out)
    except (PlotDataError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"plot-ablation: wrote {args.out}")
    return 0


def main_training(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plot-training",
        description="Training-loss curve with validation markers from a "
                    "training log CSV")
    parser.add_argument("--in", dest="input", required=True, metavar="FILE")
    parser.add_argument("--out", required=True, help="output PNG path")
    args = parser.parse_args(argv)
    try:
        render_training(read_training_log(args.input), args.out)
    except (PlotDataError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"plot-training: wrote {args.out}")
    return 0
