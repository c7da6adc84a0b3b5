"""Continuous-time finite-state Markov chains with time-varying rates.

Forward (Kolmogorov) probability solver, exact path sampling by thinning,
and the product construction that merges per-symbol paths into one
piecewise-constant parameter path.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .params import SYMBOLS, Coupling, DeltaState, StochasticParams, as_coupling

_MASK64 = (1 << 64) - 1


def splitmix64(seed: int, n: int) -> list[int]:
    """Derive n independent 63-bit seeds from a master seed.

    SplitMix64 sequence; used so that parallel Monte Carlo runs get
    reproducible, decorrelated per-run seeds.
    """
    state = seed & _MASK64
    out = []
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        z = z ^ (z >> 31)
        out.append(z >> 1)
    return out


class ConstantRates:
    """Time-independent transition-rate matrix as a callable."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if t.ndim == 0:
            return self.matrix
        return np.broadcast_to(self.matrix, t.shape + self.matrix.shape).copy()


@dataclass(frozen=True)
class MarkovChain:
    """Finite-state chain: mode values, rate function and its bounds.

    ``rates(t)`` returns the (r, r) matrix tau_{kj}(t); passing an array
    of times must return shape (nt, r, r) (ConstantRates does, and the
    traffic chain builder does).  ``rate_bounds`` are the constant upper
    bounds tau* used by the thinning sampler and the step-size choice.
    """

    mode_values: np.ndarray
    rates: Callable
    rate_bounds: np.ndarray
    initial_distribution: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mode_values",
                           np.asarray(self.mode_values, dtype=float))
        object.__setattr__(self, "rate_bounds",
                           np.asarray(self.rate_bounds, dtype=float))
        object.__setattr__(self, "initial_distribution",
                           np.asarray(self.initial_distribution, dtype=float))
        r = len(self.mode_values)
        if self.rate_bounds.shape != (r, r):
            raise ValueError("rate_bounds must be (r, r)")
        if np.any(self.rate_bounds < 0.0):
            raise ValueError("rates must be nonnegative")
        if np.any(np.abs(np.diag(self.rate_bounds)) > 0.0):
            raise ValueError("diagonal rates tau_ii must be zero")
        if self.initial_distribution.shape != (r,):
            raise ValueError("initial_distribution must have length r")
        if abs(self.initial_distribution.sum() - 1.0) > 1e-12:
            raise ValueError("initial_distribution must sum to 1")
        if np.any(self.initial_distribution < 0.0):
            raise ValueError("initial_distribution must be nonnegative")

    @property
    def n_modes(self) -> int:
        return len(self.mode_values)

    @staticmethod
    def constant(mode_values, rate_matrix, initial_distribution) -> "MarkovChain":
        m = np.asarray(rate_matrix, dtype=float)
        return MarkovChain(mode_values, ConstantRates(m), m, initial_distribution)

    def rates_at(self, t) -> np.ndarray:
        """Rate matrices at scalar or array times, validated."""
        t = np.asarray(t, dtype=float)
        out = np.asarray(self.rates(t), dtype=float)
        want = t.shape + (self.n_modes, self.n_modes)
        if out.shape != want:
            raise ValueError(f"rates returned shape {out.shape}, want {want}")
        if np.any(out < -1e-14):
            raise ValueError("negative transition rate")
        return out


@dataclass(frozen=True)
class ModePath:
    """Right-continuous piecewise-constant realization of a chain.

    ``mode_indices[k]`` is the active mode on [jump_times[k],
    jump_times[k+1]); the value at a jump time is the post-jump mode.
    """

    jump_times: np.ndarray
    mode_indices: np.ndarray
    horizon: float

    def __post_init__(self):
        object.__setattr__(self, "jump_times",
                           np.asarray(self.jump_times, dtype=float))
        object.__setattr__(self, "mode_indices",
                           np.asarray(self.mode_indices, dtype=int))
        if self.jump_times[0] != 0.0:
            raise ValueError("paths start at t = 0")
        if np.any(np.diff(self.jump_times) <= 0.0):
            raise ValueError("jump times must be increasing")
        if len(self.jump_times) != len(self.mode_indices):
            raise ValueError("one mode per interval")

    def index_at(self, t: float) -> int:
        k = int(np.searchsorted(self.jump_times, t, side="right")) - 1
        return int(self.mode_indices[max(k, 0)])


@dataclass(frozen=True)
class ProbabilityTrajectory:
    """Transition matrices P(0, t) on a time grid; rows are simplex points."""

    times: np.ndarray
    matrices: np.ndarray  # (nt, r, r)

    def row(self, i: int) -> np.ndarray:
        return self.matrices[:, i, :]

    def marginal(self, initial_distribution) -> np.ndarray:
        p0 = np.asarray(initial_distribution, dtype=float)
        return np.einsum("i,tij->tj", p0, self.matrices)

    def write_csv(self, path, initial_distribution=None):
        """CSV ``t, P_1, ..., P_r`` of the marginal mode probabilities."""
        if initial_distribution is None:
            initial_distribution = np.ones(self.matrices.shape[1])
            initial_distribution /= initial_distribution.sum()
        probs = self.marginal(initial_distribution)
        r = probs.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"P_{j + 1}" for j in range(r)])
            for t, row in zip(self.times, probs):
                w.writerow([f"{t:.17g}"] + [f"{p:.17g}" for p in row])


def solve_kolmogorov(chain: MarkovChain, t_grid,
                     dt_scale: float = 0.02) -> ProbabilityTrajectory:
    """Integrate the forward equation dP/dt = P (T(t) - diag(c(t))).

    Classical 4th-order steps with fixed dt = min(1e-2, dt_scale / c_max)
    and substepping so that every output time is a step boundary.  The
    generator has zero row sums, so row sums of P are conserved to
    roundoff for any step size; dt_scale controls the pointwise accuracy.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid[0] != 0.0 or np.any(np.diff(t_grid) <= 0.0):
        raise ValueError("t_grid must increase from 0")
    r = chain.n_modes
    c_max = float(chain.rate_bounds.sum(axis=1).max())
    dt = min(1e-2, dt_scale / c_max) if c_max > 0.0 else 1e-2

    eye = np.eye(r)
    out = np.empty((len(t_grid), r, r))
    out[0] = eye
    P = eye.copy()
    for k in range(len(t_grid) - 1):
        t0, t1 = t_grid[k], t_grid[k + 1]
        nsub = max(1, int(np.ceil((t1 - t0) / dt)))
        h = (t1 - t0) / nsub
        for lo in range(0, nsub, 20000):
            hi = min(lo + 20000, nsub)
            stage_t = t0 + lo * h + 0.5 * h * np.arange(2 * (hi - lo) + 1)
            Q = _generator(chain, stage_t)
            Q1, Q2, Q3 = Q[0:-1:2], Q[1::2], Q[2::2]
            # one-step propagators M with P_{n+1} = P_n M_n (linear
            # system, so the RK4 stages collapse into matrices
            # independent of P)
            k1 = Q1
            k2 = Q2 + (0.5 * h) * (k1 @ Q2)
            k3 = Q2 + (0.5 * h) * (k2 @ Q2)
            k4 = Q3 + h * (k3 @ Q3)
            M = eye + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            for n in range(hi - lo):
                P = P @ M[n]
        out[k + 1] = P

    if np.any(out < -1e-12):
        raise RuntimeError("probability solver produced negative entries")
    np.clip(out, 0.0, None, out=out)
    return ProbabilityTrajectory(t_grid, out)


def _generator(chain: MarkovChain, times: np.ndarray) -> np.ndarray:
    tau = chain.rates_at(times)
    c = tau.sum(axis=-1)
    Q = tau.copy()
    idx = np.arange(chain.n_modes)
    Q[..., idx, idx] = -c
    return Q


def sample_path(chain: MarkovChain, seed: int, horizon: float) -> ModePath:
    """Exact sampling of one realization by thinning.

    Proposals arrive as a Poisson process at the global bound R* =
    max_j sum_k tau*_{jk}, independent of the mode sequence, so all
    proposal times and the acceptance table (next mode per proposal and
    per possible current mode) are precomputed in bulk; only the trivial
    jump-chain recursion stays sequential.
    """
    if horizon <= 0.0:
        raise ValueError("horizon must be positive")
    rng = np.random.default_rng(seed)
    r = chain.n_modes
    R_star = float(chain.rate_bounds.sum(axis=1).max())
    mode = int(rng.choice(r, p=chain.initial_distribution))
    if R_star <= 0.0:
        return ModePath(np.array([0.0]), np.array([mode]), horizon)

    # proposal times covering [0, horizon), extended if a draw runs short
    chunks = []
    t_last, total = 0.0, 0
    while t_last < horizon:
        n = int(R_star * (horizon - t_last) + 10.0 * np.sqrt(
            R_star * (horizon - t_last)) + 20.0)
        gaps = rng.exponential(1.0 / R_star, size=n)
        chunks.append(t_last + np.cumsum(gaps))
        t_last = chunks[-1][-1]
        total += n
    props = np.concatenate(chunks)
    props = props[props < horizon]
    n_props = len(props)
    if n_props == 0:
        return ModePath(np.array([0.0]), np.array([mode]), horizon)

    # acceptance table: next[k, m] given proposal k lands in mode m
    cum = np.cumsum(chain.rates_at(props), axis=2)       # (N, r, r)
    u = (rng.random(n_props) * R_star)[:, None, None]
    idx = (u >= cum).sum(axis=2)                          # (N, r) in 0..r
    m_grid = np.arange(r)[None, :]
    next_mode = np.where(idx < r, idx, m_grid)
    flat = next_mode.ravel().tolist()

    jump_times = [0.0]
    modes = [mode]
    for k in range(n_props):
        nm = flat[k * r + mode]
        if nm != mode:
            mode = nm
            jump_times.append(float(props[k]))
            modes.append(mode)
    return ModePath(np.array(jump_times), np.array(modes), horizon)


def sample_occupancies(chain: MarkovChain, seed: int, n_paths: int,
                       record_times) -> np.ndarray:
    """Mode occupancy of many independent paths at the given instants.

    Same thinning law as sample_path, but advanced in lockstep across
    paths (every path proposes at the shared bound R*, so the k-th
    proposal of all paths is drawn together); returns an
    (n_times, n_paths) integer array.  Used for frequency-vs-solver
    validation, where whole paths are not needed.
    """
    record_times = np.asarray(record_times, dtype=float)
    if np.any(record_times < 0.0):
        raise ValueError("record times must be nonnegative")
    horizon = float(record_times.max())
    rng = np.random.default_rng(seed)
    r = chain.n_modes
    R_star = float(chain.rate_bounds.sum(axis=1).max())
    modes = rng.choice(r, size=n_paths, p=chain.initial_distribution)
    occ = np.zeros((len(record_times), n_paths), dtype=int)
    if R_star <= 0.0:
        occ[:] = modes
        return occ
    t = np.zeros(n_paths)
    done = np.zeros(len(record_times), dtype=bool)
    rows_fn = getattr(chain.rates, "rows", None)
    m_grid = np.arange(r)
    while True:
        t_new = t + rng.exponential(1.0 / R_star, size=n_paths)
        for j, rt in enumerate(record_times):
            if not done[j]:
                hit = (t <= rt) & (t_new > rt)
                occ[j, hit] = modes[hit]
                if np.all(t_new > rt):
                    done[j] = True
        if np.all(done):
            break
        if rows_fn is not None:
            rows = rows_fn(t_new, modes)
        else:
            rows = np.take_along_axis(
                chain.rates_at(t_new), modes[:, None, None],
                axis=1)[:, 0, :]
        cum = np.cumsum(rows, axis=1)
        u = rng.random(n_paths) * R_star
        idx = (u[:, None] >= cum).sum(axis=1)
        alive = t_new < horizon
        modes = np.where(alive & (idx < r), idx, modes)
        t = t_new
    return occ


@dataclass(frozen=True)
class DeltaPath:
    """Piecewise-constant six-tuple path: one DeltaState per interval."""

    jump_times: np.ndarray
    states: tuple
    horizon: float

    def __post_init__(self):
        object.__setattr__(self, "jump_times",
                           np.asarray(self.jump_times, dtype=float))
        if len(self.jump_times) != len(self.states):
            raise ValueError("one state per interval")

    def state_at(self, t: float) -> DeltaState:
        k = int(np.searchsorted(self.jump_times, t, side="right")) - 1
        return self.states[max(k, 0)]

    @staticmethod
    def constant(state: DeltaState, horizon: float) -> "DeltaPath":
        return DeltaPath(np.array([0.0]), (state,), horizon)


def product_path(stoch: StochasticParams, paths: dict) -> DeltaPath:
    """Merge one ModePath per symbol into a DeltaPath on their union of
    jump times."""
    horizons = {sym: paths[sym].horizon for sym in SYMBOLS}
    if len(set(horizons.values())) != 1:
        raise ValueError(f"horizon mismatch: {horizons}")
    horizon = paths[SYMBOLS[0]].horizon
    times = np.unique(np.concatenate([paths[s].jump_times for s in SYMBOLS]))
    states = []
    for t in times:
        idx = {s: paths[s].index_at(t) for s in SYMBOLS}
        flat = 0
        for s in SYMBOLS:
            flat = flat * stoch.n_modes(s) + idx[s]
        states.append(DeltaState(
            lam=float(stoch.modes["lam"][idx["lam"]]),
            mu=float(stoch.modes["mu"][idx["mu"]]),
            sigma_plus=as_coupling(stoch.modes["sigma_plus"][idx["sigma_plus"]]),
            sigma_minus=as_coupling(stoch.modes["sigma_minus"][idx["sigma_minus"]]),
            phi=float(stoch.modes["phi"][idx["phi"]]),
            rho=float(stoch.modes["rho"][idx["rho"]]),
            mode_index=flat,
        ))
    return DeltaPath(times, tuple(states), horizon)
