"""Acceptance: every documented CSV renders to its figure analogue and
--dump-stats reproduces the CSV statistics exactly."""

import csv

import numpy as np
import pytest

from jumpplots import FigureSpec, dump_stats, render

from jumppde.cli import main as jumppde_main


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    root = tmp_path_factory.mktemp("artifacts")
    cfg = root / "run.cfg"
    cfg.write_text("sim.horizon_s = 20\nkernel.grid_n = 65\n"
                   "sim.grid_m = 10\nmc.runs = 10\n")
    demo = root / "demo"
    assert jumppde_main(["--config", str(cfg), "--out", str(demo),
                         "traffic-demo", "--controller", "exact"]) == 0
    # the decay fit window opens after one slowest-mode transport
    # period, so the mc artifact needs the full horizon
    cfg_mc = root / "mc.cfg"
    cfg_mc.write_text("sim.horizon_s = 280\nkernel.grid_n = 65\n"
                      "sim.grid_m = 10\nmc.runs = 10\n")
    mc = root / "mc"
    assert jumppde_main(["--config", str(cfg_mc), "--out", str(mc), "mc",
                         "--controller", "exact", "--runs", "10"]) == 0
    return root


def _exact_stats(path, columns):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh)
                if r and not r[0].lstrip().startswith("#")]
    header = rows[0]
    body = np.array(rows[1:], dtype=float)
    out = {}
    for name in columns:
        v = body[:, header.index(name)]
        out[name] = (float(v.min()), float(v.max()), float(v.mean()))
    return out


def _check(spec, tmp_path, columns_per_input):
    render(spec)
    lines = dump_stats(spec)
    reported = {}
    for line in lines:
        path, name, *stats = line.split()
        vals = tuple(float(s.split("=", 1)[1]) for s in stats)
        reported[(path, name)] = vals
    for path, columns in columns_per_input.items():
        exact = _exact_stats(path, columns)
        for name in columns:
            assert reported[(str(path), name)] == exact[name], (path, name)


def test_documented_csvs_render_and_stats_match(artifacts, tmp_path):
    demo = artifacts / "demo"
    mc = artifacts / "mc"
    figs = tmp_path

    probs = demo / "probabilities.csv"
    spec = FigureSpec("lines", (str(probs),), str(figs / "prob.png"),
                      title="mode probabilities")
    _check(spec, figs, {probs: ["t", "P_1", "P_3", "P_5"]})

    mode = demo / "mode_path.csv"
    spec = FigureSpec("step", (str(mode),), str(figs / "mode.png"),
                      y=("mode",))
    _check(spec, figs, {mode: ["t", "mode"]})

    open_f = demo / "open_loop_fields.csv"
    closed_f = demo / "closed_exact_fields.csv"
    for col, center in (("rho", 0.12), ("v", 10.0)):
        spec = FigureSpec("heatmap", (str(open_f),),
                          str(figs / f"open_{col}.png"), y=(col,),
                          center=center)
        _check(spec, figs, {open_f: ["t", "x", col]})
        spec = FigureSpec("heatmap", (str(open_f), str(closed_f)),
                          str(figs / f"err_{col}.png"), y=(col,))
        _check(spec, figs, {open_f: ["t", "x", col],
                            closed_f: ["t", "x", col]})

    sides = (str(demo / "open_loop_side.csv"),
             str(demo / "closed_exact_side.csv"))
    spec = FigureSpec("lines", sides, str(figs / "norms.png"),
                      y=("norm",), labels=("open", "closed"))
    _check(spec, figs, {demo / "open_loop_side.csv": ["t", "norm"],
                        demo / "closed_exact_side.csv": ["t", "norm"]})
    spec = FigureSpec("lines", (sides[1],), str(figs / "control.png"),
                      y=("U",))
    _check(spec, figs, {demo / "closed_exact_side.csv": ["t", "U"]})

    decay = mc / "decay.csv"
    spec = FigureSpec("lines", (str(decay),), str(figs / "decay.png"),
                      y=("mean_square_norm", "fitted_curve"))
    _check(spec, figs, {decay: ["t", "mean_square_norm", "fitted_curve"]})
