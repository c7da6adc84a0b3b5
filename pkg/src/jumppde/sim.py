"""Time-domain solver for the 2x2 hyperbolic plant with jumping
coefficients: first-order upwind transport, explicit source terms,
boundary feedback at x = 1."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .kernels import GainSlice
from .markov import DeltaPath
from .params import DeltaState

CFL_NUMBER = 0.9


@dataclass(frozen=True)
class Snapshot:
    """PDE state (u, v) on a uniform grid over [0, 1] at one instant."""

    t: float
    u: np.ndarray
    v: np.ndarray
    mode: int = 0

    def __post_init__(self):
        object.__setattr__(self, "u", np.asarray(self.u, dtype=float))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float))
        if self.u.shape != self.v.shape:
            raise ValueError("u and v must share a grid")

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, len(self.u))


def l2_norm(snapshot: Snapshot) -> float:
    """Trapezoid approximation of (int u^2 + v^2 dx)^(1/2) on [0, 1]."""
    xs = snapshot.xs
    return float(np.sqrt(np.trapezoid(snapshot.u ** 2 + snapshot.v ** 2, xs)))


@dataclass(frozen=True)
class Controller:
    """Boundary feedback specification for v(1, t)."""

    kind: str  # "open_loop" | "exact_kernel" | "no_kernel"
    gains: Optional[GainSlice]
    rho0: float = 0.0

    def __post_init__(self):
        if self.kind not in ("open_loop", "exact_kernel", "no_kernel"):
            raise ValueError(f"unknown controller kind {self.kind!r}")
        if (self.gains is None) != (self.kind == "open_loop"):
            raise ValueError("gains present iff kind != open_loop")

    @staticmethod
    def open_loop() -> "Controller":
        return Controller("open_loop", None, 0.0)


def control_input(controller: Controller, snapshot: Snapshot) -> float:
    """U = -rho0 u(1) + int K^vu(1,.) u + int K^vv(1,.) v (trapezoid)."""
    if controller.kind == "open_loop":
        return 0.0
    xs = snapshot.xs
    g = controller.gains
    if len(g.xs) != len(xs) or g.xs[0] != xs[0] or g.xs[-1] != xs[-1]:
        g = g.resample(xs)
    return float(-controller.rho0 * snapshot.u[-1]
                 + np.trapezoid(g.kvu * snapshot.u, xs)
                 + np.trapezoid(g.kvv * snapshot.v, xs))


@dataclass
class Trajectory:
    """Output-cadence record of a simulation run."""

    times: np.ndarray            # output instants
    snapshots: list              # Snapshot at each output instant
    control: np.ndarray          # U at each output instant
    modes: np.ndarray            # active mode index
    norms: np.ndarray            # ||(u, v)||_L2
    delta_path: DeltaPath

    def write_csv(self, state_path, side_path):
        """Long-format state CSV ``t, x, u, v`` and side file
        ``t, U, mode, norm``."""
        with open(state_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "u", "v"])
            for snap in self.snapshots:
                for x, uu, vv in zip(snap.xs, snap.u, snap.v):
                    w.writerow([f"{snap.t:.17g}", f"{x:.17g}",
                                f"{uu:.17g}", f"{vv:.17g}"])
        with open(side_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "U", "mode", "norm"])
            for t, u, m, nrm in zip(self.times, self.control, self.modes,
                                    self.norms):
                w.writerow([f"{t:.17g}", f"{u:.17g}", str(int(m)),
                            f"{nrm:.17g}"])


def simulate(initial: Snapshot, delta_path: DeltaPath,
             controller: Controller, horizon: float,
             output_dt: float) -> Trajectory:
    """Advance the plant with piecewise-constant coefficients.

    One time step serves all modes: dt is chosen from the CFL bound
    against the largest speeds appearing in the path, then snapped per
    coefficient interval so jumps and output instants land on step
    boundaries.  Per step: interior upwind transport with explicit
    sources, then the boundary closure at the new time level, u(0) =
    phi v(0) followed by v(1) = rho u(1) + U.  U is evaluated on the
    post-transport state; its weak implicit dependence through the
    v(1) quadrature node is solved in closed form, which keeps the
    feedback time-consistent and the closed-loop floor well below the
    spatial truncation error.
    """
    if initial.t != 0.0:
        raise ValueError("initial snapshot must be at t = 0")
    m1 = len(initial.u)
    dx = 1.0 / (m1 - 1)
    speeds = [max(s.lam, s.mu) for s in delta_path.states]
    dt_base = CFL_NUMBER * dx / max(speeds)

    xs = initial.xs
    # event times: coefficient jumps and output instants
    out_times = np.arange(0.0, horizon + 0.5 * output_dt, output_dt)
    out_times[-1] = min(out_times[-1], horizon)
    jumps = delta_path.jump_times[delta_path.jump_times < horizon]
    events = np.unique(np.concatenate([out_times, jumps, [horizon]]))

    u = initial.u.copy()
    v = initial.v.copy()
    t = 0.0
    state = delta_path.state_at(0.0)
    gains = None
    wt = np.full(m1, dx)
    wt[0] = wt[-1] = 0.5 * dx
    if controller.kind != "open_loop":
        gains = controller.gains.resample(xs)

    rec_times, rec_snaps, rec_U, rec_modes, rec_norms = [], [], [], [], []

    def record(t_now, U_now):
        snap = Snapshot(t_now, u.copy(), v.copy(), state.mode_index)
        rec_times.append(t_now)
        rec_snaps.append(snap)
        rec_U.append(U_now)
        rec_modes.append(state.mode_index)
        rec_norms.append(l2_norm(snap))

    U_now = _control_value(controller, gains, xs, u, v)
    record(0.0, U_now)

    out_set = set(np.round(out_times, 12))
    for k in range(len(events) - 1):
        t0, t1 = events[k], events[k + 1]
        if t1 <= t0:
            continue
        state = delta_path.state_at(t0)
        lam, mu, sp, sm, phi, rho = _interval_coeffs(state, xs)
        nsub = max(1, int(np.ceil((t1 - t0) / dt_base)))
        dt = (t1 - t0) / nsub
        cu = lam * dt / dx
        cv = mu * dt / dx
        for _ in range(nsub):
            du = np.empty_like(u)
            dv = np.empty_like(v)
            du[1:] = u[1:] - cu * (u[1:] - u[:-1]) + dt * sp[1:] * v[1:]
            dv[:-1] = v[:-1] + cv * (v[1:] - v[:-1]) + dt * sm[:-1] * u[:-1]
            du[0] = phi * dv[0]
            if gains is None:
                dv[-1] = rho * du[-1]
            else:
                dv[-1] = 0.0
                base = (-controller.rho0 * du[-1]
                        + np.dot(wt * gains.kvu, du)
                        + np.dot(wt * gains.kvv, dv))
                w_impl = wt[-1] * gains.kvv[-1]
                U_step = (base + w_impl * rho * du[-1]) / (1.0 - w_impl)
                dv[-1] = rho * du[-1] + U_step
            u, v = du, dv
            t += dt
        t = t1
        if not np.all(np.isfinite(u)) or not np.all(np.isfinite(v)):
            raise FloatingPointError(f"state became non-finite at t={t1:.6g}")
        if np.round(t1, 12) in out_set or t1 == horizon:
            U_now = _control_value(controller, gains, xs, u, v)
            record(t1, U_now)

    return Trajectory(np.array(rec_times), rec_snaps, np.array(rec_U),
                      np.array(rec_modes), np.array(rec_norms), delta_path)


def _interval_coeffs(state: DeltaState, xs):
    return (state.lam, state.mu, state.sigma_plus(xs), state.sigma_minus(xs),
            state.phi, state.rho)


def _control_value(controller, gains, xs, u, v) -> float:
    if controller.kind == "open_loop":
        return 0.0
    return float(-controller.rho0 * u[-1]
                 + np.trapezoid(gains.kvu * u, xs)
                 + np.trapezoid(gains.kvv * v, xs))
