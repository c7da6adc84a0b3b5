"""Command-line front end: experiment orchestration and CSV emission.

Config files are flat ``key = value`` text with dotted keys (the
scenario keys documented in the traffic module plus the command groups
below); unknown keys are rejected.  Every run writes a manifest echoing
the fully resolved configuration.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time

import numpy as np

from . import __version__
from .kernels import TriangleGrid, gain_slice, kernel_residual, solve_kernels
from .markov import sample_path, solve_kolmogorov, splitmix64
from .operator import (KernelDataset, TrainConfig, generate_dataset, infer,
                       load_model, save_model, sup_error, train)
from .sim import Controller, simulate
from .stability import LyapunovParams, mc_mean_square
from .traffic import (SCENARIO_DEFAULTS, arz_nominal, build_scenario,
                      reconstruct_fields, riemann_inverse, stability_scenario)

COMMAND_KEYS = {
    "kernel.grid_n": 129,
    "dataset.n_samples": 1000,
    "dataset.grid_n": 32,
    "dataset.seed": 7,
    "dataset.spread": 0.2,
    "train.epochs": 3000,
    "train.lr": 1e-3,
    "train.latent": 32,
    "train.seed": 0,
    "lyap.nu": 0.5,
    "lyap.a": None,   # default 1 + max phi_j^2, resolved per scenario
    "bench.grid_n": 64,
    "bench.trials": 100,
}


def parse_config(path) -> dict:
    """Flat ``key = value`` file; '#' comments; values are parsed as
    numbers, comma lists of numbers, or left as strings."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, _, val = line.partition("=")
            out[key.strip()] = _parse_value(val.strip())
    return out


def _parse_value(text: str):
    if "," in text:
        return tuple(_parse_value(v.strip()) for v in text.split(",") if v.strip())
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def resolve_config(overrides: dict) -> dict:
    allowed = dict(SCENARIO_DEFAULTS)
    allowed.update(COMMAND_KEYS)
    unknown = set(overrides) - set(allowed)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    allowed.update(overrides)
    return allowed


def write_manifest(out_dir, cfg: dict, extra: dict | None = None):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write(f"# jumppde {__version__}, numpy {np.__version__}\n")
        for key in sorted(cfg):
            val = cfg[key]
            if isinstance(val, tuple):
                val = ", ".join(str(v) for v in val)
            fh.write(f"{key} = {val}\n")
        for key, val in (extra or {}).items():
            fh.write(f"{key} = {val}\n")


def _scenario_cfg(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k in SCENARIO_DEFAULTS}


def _lyap(cfg, scenario) -> LyapunovParams:
    a = cfg["lyap.a"]
    if a is None:
        a = 1.0 + max(s.phi ** 2 for s in scenario.mode_states())
    return LyapunovParams(float(cfg["lyap.nu"]), float(a))


def _controller(kind: str, cfg: dict, model_path=None):
    """exact | no | open; 'no' loads surrogate gains from model_path."""
    ts = build_scenario(_scenario_cfg(cfg))
    nom = arz_nominal(ts.nominal_tp)
    if kind == "open":
        return ts, Controller.open_loop()
    if kind == "exact":
        ks = solve_kernels(nom, int(cfg["kernel.grid_n"]))
        return ts, Controller("exact_kernel", gain_slice(ks), nom.rho0_refl)
    if kind == "no":
        if model_path is None:
            raise ValueError("--model required for the NO controller")
        model = load_model(model_path)
        ks = infer(model, nom.features(), TriangleGrid(int(cfg["kernel.grid_n"])))
        return ts, Controller("no_kernel", gain_slice(ks), nom.rho0_refl)
    raise ValueError(f"unknown controller {kind!r}")


# --------------------------------------------------------------------------
# subcommands

def cmd_kernels(args, cfg):
    ts = build_scenario(_scenario_cfg(cfg))
    nom = arz_nominal(ts.nominal_tp)
    ks = solve_kernels(nom, int(cfg["kernel.grid_n"]))
    report = kernel_residual(ks)
    os.makedirs(args.out, exist_ok=True)
    ks.write_csv(os.path.join(args.out, "kernels.csv"))
    with open(os.path.join(args.out, "residuals.txt"), "w") as fh:
        for line in report.lines():
            fh.write(line + "\n")
    print(f"kernels: n={cfg['kernel.grid_n']} sup residual "
          f"{report.sup_overall:.3e}")
    write_manifest(args.out, cfg)


def _traffic_ranges(cfg):
    ts = build_scenario(_scenario_cfg(cfg))
    feats = arz_nominal(ts.nominal_tp).features()
    spread = float(cfg["dataset.spread"])
    lo = feats - spread * np.abs(feats)
    hi = feats + spread * np.abs(feats)
    ranges = np.stack([np.minimum(lo, hi), np.maximum(lo, hi)], axis=1)
    # sigma+ is identically zero for traffic; keep it pinned
    ranges[2] = (0.0, 0.0)
    return ranges


def cmd_dataset(args, cfg):
    ranges = _traffic_ranges(cfg)
    ds = generate_dataset(ranges, int(cfg["dataset.n_samples"]),
                          int(cfg["dataset.grid_n"]),
                          int(cfg["dataset.seed"]), family="traffic")
    ds.save(args.out)
    print(f"dataset: {ds.n_samples} samples on n={ds.grid.n}, "
          f"{len(ds.train_idx)}/{len(ds.test_idx)} split, "
          f"{ds.redraws} redraws")
    write_manifest(args.out, cfg)


def cmd_train(args, cfg):
    ds = KernelDataset.load(args.dataset)
    hyper = TrainConfig(latent=int(cfg["train.latent"]),
                        lr=float(cfg["train.lr"]),
                        epochs=int(cfg["train.epochs"]),
                        seed=int(cfg["train.seed"]))
    t0 = time.perf_counter()
    model, history = train(ds, hyper)
    elapsed = time.perf_counter() - t0
    os.makedirs(args.out, exist_ok=True)
    save_model(model, os.path.join(args.out, "model.nokb"))
    with open(os.path.join(args.out, "history.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["component", "epoch", "train_mse", "test_mse"])
        for row in history:
            w.writerow(row)
    print(f"train: {hyper.epochs} epochs in {elapsed:.1f}s, "
          f"final test mse per component: "
          + " ".join(f"{c}={m:.3e}" for c, e, tr, m in history[-4:]))
    write_manifest(args.out, cfg, {"train_seconds": f"{elapsed:.3f}"})


def cmd_eval_operator(args, cfg):
    ds = KernelDataset.load(args.dataset)
    model = load_model(args.model)
    report = sup_error(model, ds, split=args.split)
    os.makedirs(args.out, exist_ok=True)
    report.write_csv(os.path.join(args.out, "sup_error.csv"))
    for line in report.lines():
        print(line)
    write_manifest(args.out, cfg)


def cmd_simulate(args, cfg):
    ts, ctrl = _controller(args.controller, cfg, args.model)
    path = (ts.nominal_delta_path() if args.nominal
            else ts.delta_path_for(splitmix64(ts.master_seed, args.run + 1)[-1]))
    traj = simulate(ts.initial_riemann(), path, ctrl, ts.horizon, ts.output_dt)
    os.makedirs(args.out, exist_ok=True)
    traj.write_csv(os.path.join(args.out, "state.csv"),
                   os.path.join(args.out, "side.csv"))
    print(f"simulate: controller={args.controller} norm "
          f"{traj.norms[0]:.4e} -> {traj.norms[-1]:.4e}")
    write_manifest(args.out, cfg, {"controller": args.controller})


def cmd_mc(args, cfg):
    ts, ctrl = _controller(args.controller, cfg, args.model)
    n_runs = args.runs or ts.n_runs
    scen = stability_scenario(ts, ctrl)
    report = mc_mean_square(scen, n_runs, ts.master_seed,
                            _lyap(cfg, ts), jobs=args.jobs)
    os.makedirs(args.out, exist_ok=True)
    report.write_csv(os.path.join(args.out, "decay.csv"))
    print(f"mc: {n_runs} runs, {report.estimate.summary()}")
    write_manifest(args.out, cfg, {"controller": args.controller,
                                   "runs": n_runs})


def cmd_traffic_demo(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    kinds = ("open", args.controller) if args.controller != "open" else ("open",)
    for kind in kinds:
        ts, ctrl = _controller(kind, cfg, args.model)
        path = ts.delta_path_for(splitmix64(ts.master_seed, 1)[0])
        traj = simulate(ts.initial_riemann(), path, ctrl, ts.horizon,
                        ts.output_dt)
        tag = {"open": "open_loop", "exact": "closed_exact",
               "no": "closed_no"}[kind]
        traj.write_csv(os.path.join(args.out, f"{tag}_riemann.csv"),
                       os.path.join(args.out, f"{tag}_side.csv"))
        tp = ts.nominal_tp
        xs_m = np.linspace(0.0, tp.L, len(traj.snapshots[0].u))
        with open(os.path.join(args.out, f"{tag}_fields.csv"), "w",
                  newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "rho", "v"])
            for snap in traj.snapshots:
                qt, vt = riemann_inverse(snap.u, snap.v, tp, xs_m)
                rho, v = reconstruct_fields(qt, vt, tp)
                for x, r, vv in zip(xs_m, rho, v):
                    w.writerow([f"{snap.t:.17g}", f"{x:.17g}",
                                f"{r:.17g}", f"{vv:.17g}"])
        print(f"traffic-demo [{tag}]: final/initial norm "
              f"{traj.norms[-1] / traj.norms[0]:.3e}")
    # mode probabilities for the figure pipeline
    t_grid = np.linspace(0.0, ts.horizon, 201)
    probs = solve_kolmogorov(ts.chain, t_grid)
    probs.write_csv(os.path.join(args.out, "probabilities.csv"),
                    ts.chain.initial_distribution)
    mp = sample_path(ts.chain, splitmix64(ts.master_seed, 1)[0], ts.horizon)
    with open(os.path.join(args.out, "mode_path.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "mode"])
        for t, m in zip(mp.jump_times, mp.mode_indices):
            w.writerow([f"{t:.17g}", str(int(m) + 1)])
    write_manifest(args.out, cfg, {"controller": args.controller})


def cmd_bench_gains(args, cfg):
    n = int(cfg["bench.grid_n"])
    trials = int(cfg["bench.trials"])
    ts = build_scenario(_scenario_cfg(cfg))
    nom = arz_nominal(ts.nominal_tp)
    grid = TriangleGrid(n)
    rows = []

    def bench(label, fn):
        fn()  # warm-up
        samples = []
        for _ in range(trials):
            t0 = time.perf_counter()
            fn()
            samples.append(time.perf_counter() - t0)
        samples.sort()
        med = samples[trials // 2]
        p90 = samples[int(0.9 * trials)]
        rows.append((label, trials, med, p90))

    bench("solver", lambda: solve_kernels(nom, n))
    if args.model:
        model = load_model(args.model)
        feats = nom.features()
        bench("neural_operator", lambda: infer(model, feats, grid))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "bench.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "trials", "median_s", "p90_s"])
        for label, tr, med, p90 in rows:
            w.writerow([label, str(tr), f"{med:.9f}", f"{p90:.9f}"])
    for label, tr, med, p90 in rows:
        print(f"{label}: median {med * 1e3:.3f} ms, p90 {p90 * 1e3:.3f} ms "
              f"({tr} trials)")
    if len(rows) == 2:
        print(f"speedup: {rows[0][2] / rows[1][2]:.1f}x")
    write_manifest(args.out, cfg)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="jumppde",
        description="Backstepping control of Markov-jump hyperbolic systems")
    ap.add_argument("--config", help="flat key = value config file")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("kernels")
    sub.add_parser("dataset")
    p = sub.add_parser("train")
    p.add_argument("--dataset", required=True)
    p = sub.add_parser("eval-operator")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="test", choices=("test", "train"))
    p = sub.add_parser("simulate")
    p.add_argument("--controller", default="exact", choices=("exact", "no", "open"))
    p.add_argument("--model")
    p.add_argument("--run", type=int, default=0)
    p.add_argument("--nominal", action="store_true",
                   help="freeze the chain at the nominal mode")
    p = sub.add_parser("mc")
    p.add_argument("--controller", default="exact", choices=("exact", "no", "open"))
    p.add_argument("--model")
    p.add_argument("--runs", type=int)
    p = sub.add_parser("traffic-demo")
    p.add_argument("--controller", default="exact", choices=("exact", "no", "open"))
    p.add_argument("--model")
    p = sub.add_parser("bench-gains")
    p.add_argument("--model")

    args = ap.parse_args(argv)
    try:
        overrides = parse_config(args.config) if args.config else {}
        cfg = resolve_config(overrides)
        handler = {
            "kernels": cmd_kernels,
            "dataset": cmd_dataset,
            "train": cmd_train,
            "eval-operator": cmd_eval_operator,
            "simulate": cmd_simulate,
            "mc": cmd_mc,
            "traffic-demo": cmd_traffic_demo,
            "bench-gains": cmd_bench_gains,
        }[args.command]
        handler(args, cfg)
    except (ValueError, FileNotFoundError, FloatingPointError,
            RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
