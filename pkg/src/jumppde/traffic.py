"""Linearized ARZ traffic case study on a ring-road section.

Traffic parameters to hyperbolic nominal tuple, Riemann-coordinate
transform, physical-variable control law, the stochastic
equilibrium-density chain, and field reconstruction for output.

Unit conventions: everything internal is SI (m, s, veh/m); km/h and
veh/km appear only in config keys and are converted on entry.  The PDE
itself lives on the normalized domain [0, 1] with speeds divided by the
road length L.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .kernels import GainSlice
from .markov import DeltaPath, MarkovChain, sample_path
from .params import DeltaState, ExponentialCoupling, NominalParams
from .sim import Controller, Snapshot
from .stability import Scenario


@dataclass(frozen=True)
class TrafficParams:
    """ARZ equilibrium data: road length L (m), free-flow speed vf (m/s),
    maximum density rho_m (veh/m), equilibrium density rho_star (veh/m),
    equilibrium speed v_star (m/s), reaction time iota (s), driver
    exponent gamma."""

    L: float
    vf: float
    rho_m: float
    rho_star: float
    v_star: float
    iota: float
    gamma: float

    def __post_init__(self):
        for name in ("L", "vf", "rho_m", "rho_star", "v_star", "iota", "gamma"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.rho_star >= self.rho_m:
            raise ValueError("rho_star must stay below the jam density")
        if self.gamma * self.p_star <= self.v_star:
            raise ValueError("gamma p* <= v*: congested-regime assumption "
                             "violated (mu0 would be nonpositive)")

    @property
    def p_star(self) -> float:
        """Equilibrium pressure vf (rho*/rho_m)^gamma."""
        return self.vf * (self.rho_star / self.rho_m) ** self.gamma

    @property
    def q_star(self) -> float:
        return self.rho_star * self.v_star

    @staticmethod
    def from_density(rho_star: float, L: float = 500.0, vf: float = 40.0,
                     rho_m: float = 0.16, iota: float = 60.0,
                     gamma: float = 1.0) -> "TrafficParams":
        """Fill v* from the equilibrium speed-density relation
        v* = vf (1 - (rho*/rho_m)^gamma)."""
        v_star = vf * (1.0 - (rho_star / rho_m) ** gamma)
        return TrafficParams(L, vf, rho_m, rho_star, v_star, iota, gamma)

    def at_density(self, rho_star: float) -> "TrafficParams":
        v_star = self.vf * (1.0 - (rho_star / self.rho_m) ** self.gamma)
        return replace(self, rho_star=rho_star, v_star=v_star)


def arz_nominal(tp: TrafficParams) -> NominalParams:
    """Hyperbolic nominal tuple of the linearized ARZ system.

    On the normalized domain: lambda0 = v*/L, mu0 = (gamma p* - v*)/L,
    sigma0+ = 0, sigma0-(xh) = -(1/iota) rho0^xh with rho0 =
    e^{-L/(iota v*)}, phi0 = (v* - gamma p*)/v*.
    """
    gp = tp.gamma * tp.p_star
    rho0 = float(np.exp(-tp.L / (tp.iota * tp.v_star)))
    return NominalParams(
        lambda0=tp.v_star / tp.L,
        mu0=(gp - tp.v_star) / tp.L,
        sigma_plus0=ExponentialCoupling(0.0, 1.0),
        sigma_minus0=ExponentialCoupling(-1.0 / tp.iota, rho0),
        phi0=(tp.v_star - gp) / tp.v_star,
        rho0_refl=rho0,
        domain_length=tp.L,
    )


def _riemann_coeffs(tp: TrafficParams) -> tuple:
    gp = tp.gamma * tp.p_star
    if abs(gp - tp.v_star) < 1e-14 * max(gp, tp.v_star):
        raise ValueError("gamma p* = v* makes the Riemann map singular")
    r = tp.q_star * (1.0 / tp.v_star - 1.0 / gp)
    s = tp.q_star / gp
    return r, s


def riemann_transform(q_tilde, v_tilde, tp: TrafficParams,
                      xs_m=None) -> tuple:
    """Physical deviations (q~, v~) on [0, L] to Riemann pair (u, v).

    u(x) = e^{x/(iota v*)} (q~(x) - r v~(x)) with r = q*(1/v* - 1/(gamma p*)),
    v(x) = (q*/(gamma p*)) v~(x).
    """
    q_tilde = np.asarray(q_tilde, dtype=float)
    v_tilde = np.asarray(v_tilde, dtype=float)
    if xs_m is None:
        xs_m = np.linspace(0.0, tp.L, len(q_tilde))
    r, s = _riemann_coeffs(tp)
    expf = np.exp(np.asarray(xs_m, dtype=float) / (tp.iota * tp.v_star))
    return expf * (q_tilde - r * v_tilde), s * v_tilde


def riemann_inverse(u, v, tp: TrafficParams, xs_m=None) -> tuple:
    """Pointwise inverse of riemann_transform."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if xs_m is None:
        xs_m = np.linspace(0.0, tp.L, len(u))
    r, s = _riemann_coeffs(tp)
    expf = np.exp(-np.asarray(xs_m, dtype=float) / (tp.iota * tp.v_star))
    v_tilde = v / s
    q_tilde = expf * u + r * v_tilde
    return q_tilde, v_tilde


def arz_control(q_tilde, v_tilde, gains: GainSlice, tp: TrafficParams) -> float:
    """Speed-limit actuation value directly from physical deviations.

    U = (r v~(L) - q~(L))
        + int_0^1 Kvu(1, xh) e^{xh L/(iota v*)} (q~ - r v~) dxh
        + int_0^1 Kvv(1, xh) (q*/(gamma p*)) v~ dxh

    which equals mapping the state through riemann_transform and
    applying the Riemann-coordinate feedback with outlet reflection
    rho0 = e^{-L/(iota v*)}.
    """
    q_tilde = np.asarray(q_tilde, dtype=float)
    v_tilde = np.asarray(v_tilde, dtype=float)
    r, s = _riemann_coeffs(tp)
    xh = np.linspace(0.0, 1.0, len(q_tilde))
    g = gains if len(gains.xs) == len(xh) else gains.resample(xh)
    expf = np.exp(xh * tp.L / (tp.iota * tp.v_star))
    w = expf * (q_tilde - r * v_tilde)
    return float(r * v_tilde[-1] - q_tilde[-1]
                 + np.trapezoid(g.kvu * w, xh)
                 + np.trapezoid(g.kvv * s * v_tilde, xh))


def reconstruct_fields(q_tilde, v_tilde, tp: TrafficParams) -> tuple:
    """Physical (rho, v) from flow/speed deviations: v = v* + v~ and
    rho = (q* + q~) / v; raises if the speed field loses positivity."""
    q_tilde = np.asarray(q_tilde, dtype=float)
    v_tilde = np.asarray(v_tilde, dtype=float)
    v = tp.v_star + v_tilde
    if np.any(v <= 0.0):
        raise ValueError("reconstructed speed is nonpositive")
    rho = (tp.q_star + q_tilde) / v
    return rho, v


# --------------------------------------------------------------------------
# stochastic equilibrium-density chain

class TrafficRates:
    """Time-varying transition rates of the five-mode density chain.

    With 1-based indices: tau_ii = 0; tau_ij = 20 from the extreme modes
    i in {1, 5}; tau_ij = 10 from middle modes into the extremes; and
    10 + 20 cos^2(0.01 (i + 5 j) t) between distinct middle modes.
    """

    def __init__(self, n_modes: int = 5):
        self.n = n_modes
        base = np.zeros((self.n, self.n))
        phase = np.zeros((self.n, self.n))
        varying = np.zeros((self.n, self.n), dtype=bool)
        for i in range(self.n):
            for j in range(self.n):
                if i == j:
                    continue
                oi, oj = i + 1, j + 1
                if oi in (1, self.n):
                    base[i, j] = 20.0
                elif oj in (1, self.n):
                    base[i, j] = 10.0
                else:
                    base[i, j] = 10.0
                    varying[i, j] = True
                    phase[i, j] = 0.01 * (oi + 5 * oj)
        self.base = base
        self.phase = phase
        self.varying = varying

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        tt = np.atleast_1d(t)[:, None, None]
        out = np.broadcast_to(self.base, (len(np.atleast_1d(t)), self.n,
                                          self.n)).copy()
        out += np.where(self.varying,
                        20.0 * np.cos(self.phase * tt) ** 2, 0.0)
        return out[0] if scalar else out

    def rows(self, t, modes) -> np.ndarray:
        """Rate rows tau[modes[k], :](t[k]) without forming full
        matrices, for the batch path sampler."""
        t = np.asarray(t, dtype=float)[:, None]
        out = self.base[modes] + np.where(
            self.varying[modes],
            20.0 * np.cos(self.phase[modes] * t) ** 2, 0.0)
        return out

    def bounds(self) -> np.ndarray:
        return self.base + np.where(self.varying, 20.0, 0.0)


DEFAULT_DENSITIES_VEH_KM = (100.0, 118.0, 120.0, 122.0, 150.0)
DEFAULT_INITIAL_PROBS = (0.02, 0.32, 0.32, 0.32, 0.02)


@dataclass(frozen=True)
class TrafficScenario:
    """Stochastic traffic setting: nominal parameters, the density
    chain, sinusoidal initial profiles, horizon and run cadence."""

    nominal_tp: TrafficParams
    densities: np.ndarray      # veh/m, one per chain mode
    chain: MarkovChain
    horizon: float             # s
    grid_m: float              # target spatial resolution, meters
    n_runs: int
    master_seed: int
    output_dt: float = 1.0

    def __post_init__(self):
        d = np.asarray(self.densities, dtype=float)
        object.__setattr__(self, "densities", d)
        if np.any(np.diff(d) <= 0.0):
            raise ValueError("mode densities must be strictly increasing")

    @property
    def n_points(self) -> int:
        return int(round(self.nominal_tp.L / self.grid_m)) + 1

    def mode_params(self) -> list:
        return [self.nominal_tp.at_density(d) for d in self.densities]

    def mode_states(self) -> list:
        out = []
        for k, tp in enumerate(self.mode_params()):
            nom = arz_nominal(tp)
            out.append(DeltaState(nom.lambda0, nom.mu0, nom.sigma_plus0,
                                  nom.sigma_minus0, nom.phi0, nom.rho0_refl,
                                  mode_index=k))
        return out

    def initial_riemann(self) -> Snapshot:
        """Riemann-coordinate image of the stop-and-go initial profiles
        rho(x,0) = rho*(1 + 0.1 sin(3 pi x/L)),
        v(x,0) = v*(1 - 0.1 sin(3 pi x/L))."""
        tp = self.nominal_tp
        xs_m = np.linspace(0.0, tp.L, self.n_points)
        s = np.sin(3.0 * np.pi * xs_m / tp.L)
        rho = tp.rho_star * (1.0 + 0.1 * s)
        v = tp.v_star * (1.0 - 0.1 * s)
        q_tilde = rho * v - tp.q_star
        v_tilde = v - tp.v_star
        u, w = riemann_transform(q_tilde, v_tilde, tp, xs_m)
        return Snapshot(0.0, u, w)

    def delta_path_for(self, seed: int) -> DeltaPath:
        mode_path = sample_path(self.chain, seed, self.horizon)
        states = self.mode_states()
        return DeltaPath(mode_path.jump_times,
                         tuple(states[k] for k in mode_path.mode_indices),
                         self.horizon)

    def nominal_delta_path(self) -> DeltaPath:
        k0 = int(np.argmin(np.abs(self.densities - self.nominal_tp.rho_star)))
        return DeltaPath.constant(self.mode_states()[k0], self.horizon)


class _ScenarioSampler:
    """Picklable seed -> DeltaPath callable for Monte Carlo workers."""

    def __init__(self, scenario: TrafficScenario):
        self.scenario = scenario

    def __call__(self, seed: int) -> DeltaPath:
        return self.scenario.delta_path_for(seed)


def stability_scenario(ts: TrafficScenario, controller: Controller,
                       lam_min: float | None = None,
                       mu_min: float | None = None) -> Scenario:
    """Adapter feeding a traffic setting into the Monte-Carlo machinery."""
    states = ts.mode_states()
    lam_min = lam_min or min(s.lam for s in states)
    mu_min = mu_min or min(s.mu for s in states)
    return Scenario(ts.initial_riemann(), _ScenarioSampler(ts), controller,
                    ts.horizon, ts.output_dt,
                    Scenario.fit_start(lam_min, mu_min))


_KMH = 1.0 / 3.6          # km/h -> m/s
_VEH_KM = 1.0 / 1000.0    # veh/km -> veh/m

SCENARIO_DEFAULTS = {
    "road.length_m": 500.0,
    "traffic.vf_kmh": 144.0,
    "traffic.rho_max_veh_km": 160.0,
    "traffic.rho_star_veh_km": 120.0,
    "traffic.v_star_kmh": None,    # derived from the speed-density relation
    "traffic.iota_s": 60.0,
    "traffic.gamma": 1.0,
    "chain.densities_veh_km": DEFAULT_DENSITIES_VEH_KM,
    "chain.initial_probs": DEFAULT_INITIAL_PROBS,
    "sim.horizon_s": 200.0,
    "sim.grid_m": 2.5,
    "mc.runs": 50,
    "mc.seed": 20240817,
}


def build_scenario(config: dict | None = None) -> TrafficScenario:
    """Scenario from a flat key -> value config; unknown keys rejected,
    missing keys defaulted to the reference setting."""
    cfg = dict(SCENARIO_DEFAULTS)
    if config:
        unknown = set(config) - set(cfg)
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        cfg.update(config)

    vf = float(cfg["traffic.vf_kmh"]) * _KMH
    rho_m = float(cfg["traffic.rho_max_veh_km"]) * _VEH_KM
    rho_star = float(cfg["traffic.rho_star_veh_km"]) * _VEH_KM
    gamma = float(cfg["traffic.gamma"])
    if cfg["traffic.v_star_kmh"] is None:
        v_star = vf * (1.0 - (rho_star / rho_m) ** gamma)
    else:
        v_star = float(cfg["traffic.v_star_kmh"]) * _KMH
    tp = TrafficParams(float(cfg["road.length_m"]), vf, rho_m, rho_star,
                       v_star, float(cfg["traffic.iota_s"]), gamma)

    densities = np.asarray(cfg["chain.densities_veh_km"], dtype=float) * _VEH_KM
    probs = np.asarray(cfg["chain.initial_probs"], dtype=float)
    if len(densities) != len(probs):
        raise ValueError("one initial probability per chain mode")
    rates = TrafficRates(len(densities))
    chain = MarkovChain(densities, rates, rates.bounds(), probs)
    return TrafficScenario(tp, densities, chain,
                           float(cfg["sim.horizon_s"]),
                           float(cfg["sim.grid_m"]),
                           int(cfg["mc.runs"]), int(cfg["mc.seed"]))
