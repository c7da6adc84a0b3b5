import numpy as np
import pytest

from jumppde.kernels import gain_slice, solve_kernels
from jumppde.markov import DeltaPath
from jumppde.params import DeltaState, NominalParams
from jumppde.sim import Controller, Snapshot, l2_norm, simulate
from jumppde.stability import (DecayReport, LyapunovParams, Scenario,
                               fit_decay, lyapunov_bounds, lyapunov_trace,
                               lyapunov_value, mc_mean_square)


def unit_delta():
    nom = NominalParams.constant(1.0, 1.0, 0.0, 0.0, -2.0, 0.5)
    return DeltaState.from_nominal(nom)


def test_lyapunov_params_validation():
    with pytest.raises(ValueError):
        LyapunovParams(0.0, 1.0)
    with pytest.raises(ValueError):
        LyapunovParams(0.5, -1.0)


def test_lyapunov_zero_state():
    xs = np.linspace(0.0, 1.0, 21)
    s = Snapshot(0.0, np.zeros(21), np.zeros(21))
    assert lyapunov_value(s, unit_delta(), LyapunovParams(0.5, 1.0)) == 0.0


def test_lyapunov_collapses_to_l2_as_nu_vanishes():
    xs = np.linspace(0.0, 1.0, 401)
    alpha = np.sin(np.pi * xs)
    beta = np.cos(2.0 * np.pi * xs)
    s = Snapshot(0.0, alpha, beta)
    v = lyapunov_value(s, unit_delta(), LyapunovParams(1e-9, 1.0))
    ref = l2_norm(s) ** 2
    assert v == pytest.approx(ref, rel=1e-6)


def test_lyapunov_sandwich_bounds(rng):
    d = DeltaState.from_nominal(
        NominalParams.constant(0.7, 1.9, 0.0, 0.0, -2.0, 0.5))
    p = LyapunovParams(0.8, 2.5)
    lo, hi = lyapunov_bounds(d, p)
    xs = np.linspace(0.0, 1.0, 201)
    for _ in range(20):
        s = Snapshot(0.0, rng.standard_normal(201), rng.standard_normal(201))
        nrm2 = l2_norm(s) ** 2
        v = lyapunov_value(s, d, p)
        assert lo * nrm2 - 1e-12 <= v <= hi * nrm2 + 1e-12


def test_fit_decay_exact_exponential():
    t = np.linspace(0.0, 5.0, 50)
    est = fit_decay(t, 3.0 * np.exp(-2.0 * t))
    assert abs(est.sigma_hat - 2.0) < 1e-6
    assert abs(est.kappa_hat - 3.0) < 1e-6
    assert est.r_squared == pytest.approx(1.0)
    assert est.accepted


def test_fit_decay_constant_series():
    t = np.linspace(0.0, 5.0, 20)
    est = fit_decay(t, np.full(20, 4.0))
    assert est.sigma_hat == pytest.approx(0.0, abs=1e-12)


def test_fit_decay_noisy_exponential(rng):
    t = np.linspace(0.0, 10.0, 200)
    y = np.exp(-1.0 * t) * (1.0 + 0.01 * rng.standard_normal(200))
    est = fit_decay(t, y)
    assert 0.95 <= est.sigma_hat <= 1.05


def test_fit_decay_excludes_nonpositive():
    t = np.linspace(0.0, 4.0, 9)
    y = np.exp(-t)
    y[3] = 0.0
    est = fit_decay(t, y)
    assert est.n_excluded == 1
    with pytest.raises(ValueError):
        fit_decay([0.0, 1.0, 2.0], [1.0, 0.0, 0.0])


def _constant_sampler_factory(delta, horizon):
    class _Sampler:
        def __call__(self, seed):
            return DeltaPath.constant(delta, horizon)
    return _Sampler()


def test_mc_mean_square_single_mode_reduces_to_deterministic():
    nom = NominalParams.constant(1.0, 1.5, 0.4, 0.6, -2.0, 0.5)
    ks = solve_kernels(nom, 65)
    ctrl = Controller("exact_kernel", gain_slice(ks), nom.rho0_refl)
    xs = np.linspace(0.0, 1.0, 101)
    ini = Snapshot(0.0, np.sin(np.pi * xs), np.cos(np.pi * xs))
    horizon = 3.0
    scen = Scenario(ini, _constant_sampler_factory(
        DeltaState.from_nominal(nom), horizon), ctrl, horizon, 0.1,
        t_fit_start=0.0)
    rep = mc_mean_square(scen, 10, 123)
    assert rep.estimate.sigma_hat > 0.5
    # deterministic runs: the mean square equals any single run
    assert rep.mean_square[0] == pytest.approx(l2_norm(ini) ** 2, rel=1e-10)
    with pytest.raises(ValueError):
        mc_mean_square(scen, 5, 123)


def test_decay_report_csv(tmp_path):
    t = np.linspace(0.0, 5.0, 20)
    y = np.exp(-2.0 * t)
    est = fit_decay(t, y, n_runs=10)
    rep = DecayReport(t, y, est.kappa_hat * np.exp(-est.sigma_hat * t), est)
    out = tmp_path / "decay.csv"
    rep.write_csv(out)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "t,mean_square_norm,fitted_curve"
    assert lines[-1].startswith("# ")
    assert "sigma_hat=2" in lines[-1]


def test_lyapunov_trace_zero_trajectory():
    nom = NominalParams.constant(1.0, 1.0, 0.0, 0.0, -2.0, 0.5)
    ks = solve_kernels(nom, 33)
    path = DeltaPath.constant(DeltaState.from_nominal(nom), 1.0)
    xs = np.linspace(0.0, 1.0, 51)
    ini = Snapshot(0.0, np.zeros(51), np.zeros(51))
    traj = simulate(ini, path, Controller.open_loop(), 1.0, 0.5)
    vals = lyapunov_trace(traj, ks, LyapunovParams(0.5, 1.0))
    assert np.all(vals == 0.0)
