"""End-to-end acceptance criteria.

Each test covers exactly one criterion at its stated tolerance, so the
verbose pytest report carries one pass/fail line per criterion.  The
heavyweight artifacts (the 1000-sample dataset and the trained
surrogates) are built once per session.
"""

import time

import numpy as np
import pytest

from jumppde.cli import _traffic_ranges, resolve_config
from jumppde.kernels import (TransformOperator, TriangleGrid, gain_slice,
                             solve_kernels)
from jumppde.markov import (DeltaPath, MarkovChain, sample_occupancies,
                            solve_kolmogorov, splitmix64)
from jumppde.operator import (TrainConfig, generate_dataset, infer, sup_error,
                              train)
from jumppde.params import DeltaState, NominalParams, nominal_from_features
from jumppde.sim import Controller, Snapshot, simulate
from jumppde.stability import Scenario, fit_decay, mc_mean_square
from jumppde.traffic import (DEFAULT_INITIAL_PROBS, TrafficRates, arz_nominal,
                             build_scenario, stability_scenario)

RUNS = 50


@pytest.fixture(scope="module")
def acc_dataset():
    ranges = _traffic_ranges(resolve_config({}))
    return generate_dataset(ranges, 1000, 32, seed=7, family="traffic")


@pytest.fixture(scope="module")
def acc_model(acc_dataset):
    t0 = time.perf_counter()
    model, _ = train(acc_dataset, TrainConfig())
    return model, time.perf_counter() - t0


@pytest.fixture(scope="module")
def acc_model_small(acc_dataset):
    model, _ = train(acc_dataset, TrainConfig(epochs=600, als_iters=2))
    return model


@pytest.fixture(scope="module")
def scenario():
    return build_scenario()


@pytest.fixture(scope="module")
def exact_gains(scenario):
    nom = arz_nominal(scenario.nominal_tp)
    return gain_slice(solve_kernels(nom, 129)), nom


def no_controller(model, scenario):
    nom = arz_nominal(scenario.nominal_tp)
    ks = infer(model, nom.features(), TriangleGrid(129))
    return Controller("no_kernel", gain_slice(ks), nom.rho0_refl)


def test_kolmogorov_correctness():
    t0 = time.perf_counter()
    ts = np.linspace(0.0, 5.0, 26)
    for c in (0.5, 2.0, 20.0):
        Q = np.array([[0.0, c], [c, 0.0]])
        chain = MarkovChain.constant(np.array([0.0, 1.0]), Q,
                                     np.array([1.0, 0.0]))
        p11 = solve_kolmogorov(chain, ts).matrices[:, 0, 0]
        exact = 0.5 * (1.0 + np.exp(-2.0 * c * ts))
        assert np.max(np.abs(p11 - exact)) < 1e-8, f"c={c}"

    rates = TrafficRates()
    chain = MarkovChain(np.arange(5.0), rates, rates.bounds(),
                        np.array(DEFAULT_INITIAL_PROBS))
    traj = solve_kolmogorov(chain, np.linspace(0.0, 200.0, 41), dt_scale=0.8)
    row_err = np.max(np.abs(traj.matrices.sum(axis=2) - 1.0))
    assert row_err < 1e-10
    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0, f"runtime {elapsed:.1f}s"


def test_sampler_solver_agreement(scenario):
    t0 = time.perf_counter()
    times = [10.0, 50.0, 100.0, 150.0, 200.0]
    n_paths = 10_000
    occ = sample_occupancies(scenario.chain, 20240817, n_paths, times)
    traj = solve_kolmogorov(scenario.chain, np.array([0.0] + times))
    probs = traj.marginal(scenario.chain.initial_distribution)[1:]
    for k, t in enumerate(times):
        for m in range(scenario.chain.n_modes):
            p = probs[k, m]
            freq = float((occ[k] == m).mean())
            sigma = np.sqrt(p * (1.0 - p) / n_paths)
            assert abs(freq - p) <= 3.0 * sigma, \
                f"t={t} mode={m}: freq {freq:.4f} vs p {p:.4f}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0, f"runtime {elapsed:.1f}s"


def test_finite_time_convergence_theorem1(scenario):
    t0 = time.perf_counter()
    traffic_nom = arz_nominal(scenario.nominal_tp)
    rng = np.random.default_rng(2024)
    random_nom = NominalParams.constant(
        rng.uniform(0.8, 1.5), rng.uniform(0.8, 1.5),
        rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8),
        rng.uniform(-2.5, -1.2), rng.uniform(0.2, 0.8))
    cases = {
        "constant": NominalParams.constant(1.0, 1.5, 0.4, 0.6, -2.0, 0.5),
        "traffic": traffic_nom,
        "random": random_nom,
    }
    m = 400
    xs = np.linspace(0.0, 1.0, m)
    for label, nom in cases.items():
        tf = 1.0 / nom.lambda0 + 1.0 / nom.mu0
        margin = 0.2 * max(1.0 / nom.lambda0, 1.0 / nom.mu0)
        horizon = tf + margin
        gains = gain_slice(solve_kernels(nom, 129))
        ini = Snapshot(0.0, np.sin(np.pi * xs), np.cos(np.pi * xs))
        path = DeltaPath.constant(DeltaState.from_nominal(nom), horizon)
        closed = simulate(ini, path,
                          Controller("exact_kernel", gains, nom.rho0_refl),
                          horizon, horizon)
        ratio = closed.norms[-1] / closed.norms[0]
        assert ratio <= 1e-3, f"{label}: closed-loop ratio {ratio:.2e}"
        open_traj = simulate(ini, path, Controller.open_loop(),
                             horizon, horizon)
        open_ratio = open_traj.norms[-1] / open_traj.norms[0]
        assert open_ratio > 1e-3, f"{label}: open-loop ratio {open_ratio:.2e}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0, f"runtime {elapsed:.1f}s"


def test_transform_invertibility(scenario):
    nom = arz_nominal(scenario.nominal_tp)
    ks = solve_kernels(nom, 128)
    op = TransformOperator(ks, np.linspace(0.0, 1.0, 128))
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        u = rng.standard_normal(128)
        v = rng.standard_normal(128)
        ub, vb = op.inverse(*op.forward(u, v))
        worst = max(worst, float(np.max(np.abs(ub - u))),
                    float(np.max(np.abs(vb - v))))
    assert worst < 1e-8, f"round-trip sup {worst:.2e}"


def test_operator_quality(acc_dataset, acc_model):
    model, train_seconds = acc_model
    assert acc_dataset.n_samples == 1000
    assert len(acc_dataset.train_idx) == 900
    assert len(acc_dataset.test_idx) == 100
    report = sup_error(model, acc_dataset, split="test")
    for line in report.lines():
        print(line)
    for k, c in enumerate(report.components):
        assert report.max_abs_normalized[k] <= 1e-2, \
            f"K{c}: held-out sup {report.max_abs_normalized[k]:.3e}"
    assert train_seconds < 1800.0, f"training took {train_seconds:.0f}s"


def test_inference_speedup(acc_model, scenario):
    model, _ = acc_model
    nom = arz_nominal(scenario.nominal_tp)
    grid = TriangleGrid(64)
    feats = nom.features()

    def median_time(fn, trials=100):
        fn()  # warm-up
        samples = []
        for _ in range(trials):
            t0 = time.perf_counter()
            fn()
            samples.append(time.perf_counter() - t0)
        samples.sort()
        return samples[trials // 2]

    solver_med = median_time(lambda: solve_kernels(nom, 64))
    no_med = median_time(lambda: infer(model, feats, grid))
    speedup = solver_med / no_med
    print(f"solver median {solver_med * 1e3:.3f} ms, "
          f"neural operator median {no_med * 1e3:.3f} ms, "
          f"speedup {speedup:.1f}x")
    assert speedup >= 10.0, f"speedup {speedup:.1f}x"


def test_mean_square_stabilization(acc_model, scenario):
    t0 = time.perf_counter()
    model, _ = acc_model
    ctrl = no_controller(model, scenario)
    ini = scenario.initial_riemann()
    seeds = splitmix64(scenario.master_seed, RUNS)
    times = None
    acc = None
    crossings = []
    for seed in seeds:
        path = scenario.delta_path_for(seed)
        traj = simulate(ini, path, ctrl, scenario.horizon, scenario.output_dt)
        if times is None:
            times = traj.times
            acc = np.zeros_like(times)
        acc += traj.norms ** 2
        below = np.nonzero(traj.norms < 0.1 * traj.norms[0])[0]
        crossings.append(times[below[0]] if len(below) else scenario.horizon)
    mean_sq = acc / RUNS
    nom = arz_nominal(scenario.nominal_tp)
    fit_from = Scenario.fit_start(nom.lambda0, nom.mu0)
    window = times >= fit_from
    est = fit_decay(times[window], mean_sq[window], n_runs=RUNS)
    final_ratio = mean_sq[-1] / mean_sq[0]
    median_cross = float(np.median(crossings))
    elapsed = time.perf_counter() - t0
    print(f"sigma_hat={est.sigma_hat:.4f} r2={est.r_squared:.3f} "
          f"final/initial={final_ratio:.2e} "
          f"median 10%-crossing={median_cross:.0f}s ({elapsed:.0f}s)")
    assert est.sigma_hat > 0.0
    assert est.r_squared >= 0.8
    assert final_ratio <= 0.05
    assert 60.0 <= median_cross <= 180.0
    assert elapsed < 900.0, f"runtime {elapsed:.0f}s"


def test_no_vs_exact_closed_loop_gap(acc_dataset, acc_model, acc_model_small,
                                     scenario, exact_gains):
    from jumppde.traffic import reconstruct_fields, riemann_inverse
    gains, nom = exact_gains
    model, _ = acc_model

    path = scenario.delta_path_for(splitmix64(scenario.master_seed, 1)[0])
    ini = scenario.initial_riemann()
    tp = scenario.nominal_tp
    xs_m = np.linspace(0.0, tp.L, len(ini.u))

    def fields(ctrl):
        traj = simulate(ini, path, ctrl, scenario.horizon, scenario.output_dt)
        rho = np.empty((len(traj.times), len(xs_m)))
        vel = np.empty_like(rho)
        for k, snap in enumerate(traj.snapshots):
            qt, vt = riemann_inverse(snap.u, snap.v, tp, xs_m)
            rho[k], vel[k] = reconstruct_fields(qt, vt, tp)
        return rho, vel

    rho_ex, vel_ex = fields(Controller("exact_kernel", gains, nom.rho0_refl))
    gaps = {}
    sups = {}
    for tag, mod in (("full", model), ("small", acc_model_small)):
        rho_no, vel_no = fields(no_controller(mod, scenario))
        d_rho = float(np.max(np.abs(rho_no - rho_ex))) * 1000.0   # veh/km
        d_vel = float(np.max(np.abs(vel_no - vel_ex))) * 3.6      # km/h
        gaps[tag] = (d_rho, d_vel)
        rep = sup_error(mod, acc_dataset, split="test")
        sups[tag] = float(rep.max_abs_normalized.max())

    for tag, (d_rho, d_vel) in gaps.items():
        print(f"{tag} budget: max|d rho| {d_rho:.4f} veh/km, "
              f"max|d v| {d_vel:.4f} km/h, sup err {sups[tag]:.3e}")
        assert np.isfinite(d_rho) and np.isfinite(d_vel)
    assert sups["small"] > sups["full"]
    assert gaps["small"][0] > gaps["full"][0]
    assert gaps["small"][1] > gaps["full"][1]


def test_robustness_trend(scenario, exact_gains):
    gains, nom = exact_gains
    ctrl = Controller("exact_kernel", gains, nom.rho0_refl)
    offsets = np.array([-1.0, -0.1, 0.0, 0.1, 1.0])
    rates_hat = []
    for spread in (2.0, 20.0, 38.0):
        dens = tuple(120.0 + spread * o for o in offsets)
        ts = build_scenario({"chain.densities_veh_km": dens})
        scen = stability_scenario(ts, ctrl, lam_min=nom.lambda0,
                                  mu_min=nom.mu0)
        rep = mc_mean_square(scen, RUNS, ts.master_seed)
        rates_hat.append(rep.estimate.sigma_hat)
    print("sigma_hat by spread (2, 20, 38 veh/km):",
          [f"{s:.4f}" for s in rates_hat])
    assert rates_hat[0] >= rates_hat[1] >= rates_hat[2], rates_hat
