"""Batch figure tool: ``--spec file.json`` or per-figure flags."""

from __future__ import annotations

import argparse
import json
import sys

from .figures import FigureSpec, dump_stats, render


def spec_from_dict(d: dict) -> FigureSpec:
    allowed = {"kind", "inputs", "output", "x", "y", "space", "labels",
               "title", "xlabel", "ylabel", "center", "dpi"}
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown spec keys: {sorted(unknown)}")
    d = dict(d)
    for key in ("inputs", "y", "labels"):
        if key in d and isinstance(d[key], str):
            d[key] = (d[key],)
    return FigureSpec(**d)


def load_specs(path) -> list:
    with open(path) as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = [data]
    return [spec_from_dict(d) for d in data]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="jumppde-plots",
        description="Render PNG figures from simulation CSV artifacts")
    ap.add_argument("--spec", help="JSON figure spec (object or list)")
    ap.add_argument("--kind", choices=("heatmap", "lines", "step"))
    ap.add_argument("--input", action="append", default=[],
                    help="input CSV (repeatable)")
    ap.add_argument("--out", help="output PNG path")
    ap.add_argument("--x", default="t", help="x-axis column")
    ap.add_argument("--y", action="append", default=[],
                    help="value column (repeatable)")
    ap.add_argument("--space", default="x",
                    help="space column for heatmaps")
    ap.add_argument("--label", action="append", default=[],
                    help="legend label per input (repeatable)")
    ap.add_argument("--title", default="")
    ap.add_argument("--xlabel", default="")
    ap.add_argument("--ylabel", default="")
    ap.add_argument("--center", type=float,
                    help="symmetric color-scale midpoint (heatmaps)")
    ap.add_argument("--dpi", type=int, default=150)
    ap.add_argument("--dump-stats", action="store_true",
                    help="print min/max/mean of the plotted columns "
                         "instead of rendering")
    args = ap.parse_args(argv)

    try:
        if args.spec:
            specs = load_specs(args.spec)
        else:
            if not (args.kind and args.input and args.out):
                ap.error("--kind, --input and --out are required "
                         "without --spec")
            specs = [FigureSpec(
                kind=args.kind, inputs=tuple(args.input), output=args.out,
                x=args.x, y=tuple(args.y), space=args.space,
                labels=tuple(args.label), title=args.title,
                xlabel=args.xlabel, ylabel=args.ylabel, center=args.center,
                dpi=args.dpi)]
        for spec in specs:
            if args.dump_stats:
                for line in dump_stats(spec):
                    print(line)
            else:
                print(render(spec))
    except (OSError, ValueError, json.JSONDecodeError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
