"""Figure specifications and the CSV -> PNG renderer."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import matplotlib
import numpy as np

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

KINDS = ("heatmap", "lines", "step")


@dataclass(frozen=True)
class FigureSpec:
    """One figure: input CSVs, kind and axis/output choices.

    kind "lines" overlays the ``y`` columns of every input against the
    ``x`` column; "step" draws them as piecewise-constant (mode paths);
    "heatmap" pivots a long-format CSV (time column ``x``, space column
    ``space``) into a time-space image of the single ``y`` column.  Two
    heatmap inputs render their difference (error heatmap).
    """

    kind: str
    inputs: tuple
    output: str
    x: str = "t"
    y: tuple = ()
    space: str = "x"
    labels: tuple = ()
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    center: float | None = None   # symmetric color-scale midpoint
    dpi: int = 150

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown figure kind {self.kind!r}")
        if not self.inputs:
            raise ValueError("at least one input CSV required")
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "y", tuple(self.y))
        object.__setattr__(self, "labels", tuple(self.labels))
        if self.kind == "heatmap":
            if len(self.y) != 1:
                raise ValueError("heatmap needs exactly one value column")
            if len(self.inputs) > 2:
                raise ValueError("heatmap takes one input or a pair to "
                                 "difference")
        if self.labels and len(self.labels) != len(self.inputs):
            raise ValueError("one label per input")


def read_csv(path) -> dict:
    """Documented-CSV reader: header row, numeric body, '#' comment
    lines ignored; returns column name -> float array."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh)
                if r and not r[0].lstrip().startswith("#")]
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    header = [h.strip() for h in rows[0]]
    body = np.array(rows[1:], dtype=float)
    if body.ndim != 2 or body.shape[1] != len(header):
        raise ValueError(f"{path}: ragged CSV body")
    return {name: body[:, k] for k, name in enumerate(header)}


def _columns(table: dict, names, path) -> list:
    missing = [n for n in names if n not in table]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}; "
                         f"has {sorted(table)}")
    return [table[n] for n in names]


def _plot_columns(spec: FigureSpec, table: dict, path) -> list:
    ys = spec.y or tuple(n for n in table if n != spec.x)
    _columns(table, (spec.x, *ys), path)
    return list(ys)


def _pivot(table: dict, spec: FigureSpec, path):
    t, xs, val = _columns(table, (spec.x, spec.space, spec.y[0]), path)
    tu, ti = np.unique(t, return_inverse=True)
    xu, xi = np.unique(xs, return_inverse=True)
    grid = np.full((len(xu), len(tu)), np.nan)
    grid[xi, ti] = val
    if np.any(np.isnan(grid)):
        raise ValueError(f"{path}: incomplete (t, x) grid for heatmap")
    return tu, xu, grid


def _label(spec: FigureSpec, idx: int) -> str:
    if spec.labels:
        return spec.labels[idx]
    stem = os.path.splitext(os.path.basename(spec.inputs[idx]))[0]
    return stem


def render(spec: FigureSpec) -> str:
    """Render the figure and return the written PNG path."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    try:
        if spec.kind == "heatmap":
            tu, xu, grid = _pivot(read_csv(spec.inputs[0]), spec,
                                  spec.inputs[0])
            if len(spec.inputs) == 2:
                tu2, xu2, grid2 = _pivot(read_csv(spec.inputs[1]), spec,
                                         spec.inputs[1])
                if grid2.shape != grid.shape or not (
                        np.array_equal(tu, tu2) and np.array_equal(xu, xu2)):
                    raise ValueError("heatmap inputs on different grids")
                grid = grid - grid2
            center = spec.center
            if center is None and len(spec.inputs) == 2:
                center = 0.0
            if center is not None:
                half = float(np.max(np.abs(grid - center))) or 1.0
                mesh = ax.pcolormesh(tu, xu, grid, cmap="RdBu_r",
                                     vmin=center - half, vmax=center + half,
                                     shading="nearest")
            else:
                mesh = ax.pcolormesh(tu, xu, grid, shading="nearest")
            fig.colorbar(mesh, ax=ax, label=spec.y[0])
        else:
            for idx, path in enumerate(spec.inputs):
                table = read_csv(path)
                ys = _plot_columns(spec, table, path)
                for col in ys:
                    label = (col if len(spec.inputs) == 1
                             else f"{_label(spec, idx)} {col}")
                    if spec.kind == "step":
                        ax.step(table[spec.x], table[col], where="post",
                                label=label)
                    else:
                        ax.plot(table[spec.x], table[col], label=label)
            ax.legend(loc="best", fontsize=8)
        ax.set_xlabel(spec.xlabel or spec.x)
        if spec.ylabel:
            ax.set_ylabel(spec.ylabel)
        if spec.title:
            ax.set_title(spec.title)
        fig.tight_layout()
        out_dir = os.path.dirname(os.path.abspath(spec.output))
        os.makedirs(out_dir, exist_ok=True)
        fig.savefig(spec.output, dpi=spec.dpi)
    finally:
        plt.close(fig)
    return spec.output


def column_stats(path, columns=None) -> list:
    """(column, min, max, mean) straight from the CSV values."""
    table = read_csv(path)
    names = list(columns) if columns else list(table)
    cols = _columns(table, names, path)
    return [(n, float(v.min()), float(v.max()), float(v.mean()))
            for n, v in zip(names, cols)]


def dump_stats(spec: FigureSpec) -> list:
    """Stats lines for every column the spec would plot."""
    lines = []
    for path in spec.inputs:
        table = read_csv(path)
        if spec.kind == "heatmap":
            names = [spec.x, spec.space, spec.y[0]]
        else:
            names = [spec.x] + _plot_columns(spec, table, path)
        for name, lo, hi, mean in column_stats(path, names):
            lines.append(f"{path} {name} min={lo:.17g} max={hi:.17g} "
                         f"mean={mean:.17g}")
    return lines
