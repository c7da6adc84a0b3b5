"""Plant parameter types and the target-system coupling diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SYMBOLS = ("lam", "mu", "sigma_plus", "sigma_minus", "phi", "rho")


class Coupling:
    """Spatial coupling coefficient on the unit interval.

    Scalar couplings are represented as constant functions so that the
    spatially varying traffic case and the constant abstract case share
    one code path.  Instances are picklable (needed by process pools).
    """

    def __call__(self, x):
        raise NotImplementedError

    def at_zero(self) -> float:
        return float(self(np.array([0.0]))[0])


class ConstantCoupling(Coupling):
    def __init__(self, value: float):
        self.value = float(value)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.full_like(x, self.value)

    def __repr__(self):
        return f"ConstantCoupling({self.value!r})"


class TabulatedCoupling(Coupling):
    """Piecewise-linear table on [0, 1]."""

    def __init__(self, xs, values):
        self.xs = np.asarray(xs, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.xs.shape != self.values.shape or self.xs.ndim != 1:
            raise ValueError("table grids must be 1-d and of equal length")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("coupling table contains non-finite values")

    def __call__(self, x):
        return np.interp(np.asarray(x, dtype=float), self.xs, self.values)


class ExponentialCoupling(Coupling):
    """amplitude * base**x, the shape of the traffic relaxation term."""

    def __init__(self, amplitude: float, base: float):
        if base <= 0.0:
            raise ValueError("base must be positive")
        self.amplitude = float(amplitude)
        self.base = float(base)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.amplitude * self.base ** x

    def __repr__(self):
        return f"ExponentialCoupling({self.amplitude!r}, {self.base!r})"


def as_coupling(value) -> Coupling:
    if isinstance(value, Coupling):
        return value
    return ConstantCoupling(float(value))


@dataclass(frozen=True)
class NominalParams:
    """Nominal plant tuple (lambda0, mu0, sigma0+, sigma0-, phi0, rho0).

    Speeds are expressed per unit domain (1/time); a physical domain of
    length L is normalized to [0, 1] with speeds divided by L and
    ``domain_length`` recording L for unit conversions at the edges.
    """

    lambda0: float
    mu0: float
    sigma_plus0: Coupling
    sigma_minus0: Coupling
    phi0: float
    rho0_refl: float
    domain_length: float = 1.0

    def __post_init__(self):
        if self.lambda0 <= 0.0 or self.mu0 <= 0.0:
            raise ValueError("characteristic speeds must be positive")
        for c in (self.sigma_plus0, self.sigma_minus0):
            vals = c(np.linspace(0.0, 1.0, 33))
            if not np.all(np.isfinite(vals)):
                raise ValueError("coupling function not finite on [0, 1]")

    @staticmethod
    def constant(lambda0, mu0, sigma_plus0, sigma_minus0, phi0, rho0_refl,
                 domain_length=1.0) -> "NominalParams":
        return NominalParams(lambda0, mu0, as_coupling(sigma_plus0),
                             as_coupling(sigma_minus0), phi0, rho0_refl,
                             domain_length)

    def features(self) -> np.ndarray:
        """Six scalar features (coupling functions represented by their
        value at x=0) used as the surrogate's branch input."""
        return np.array([
            self.lambda0, self.mu0,
            self.sigma_plus0.at_zero(), self.sigma_minus0.at_zero(),
            self.phi0, self.rho0_refl,
        ])


def nominal_from_features(vec, family: str = "constant",
                          domain_length: float = 1.0) -> NominalParams:
    """Rebuild a NominalParams from its six scalar features.

    family="constant": both couplings constant in x.
    family="traffic": sigma- has the exponential shape s0 * rho0**x,
    which ties its spatial decay to the outlet reflection exactly as in
    the linearized traffic model.
    """
    lam, mu, sp, sm, phi, rho = (float(v) for v in vec)
    if family == "constant":
        sminus: Coupling = ConstantCoupling(sm)
    elif family == "traffic":
        sminus = ExponentialCoupling(sm, rho)
    else:
        raise ValueError(f"unknown family {family!r}")
    return NominalParams(lam, mu, ConstantCoupling(sp), sminus, phi, rho,
                         domain_length)


@dataclass(frozen=True)
class StochasticParams:
    """Per-symbol mode lists for the six jumping parameters."""

    modes: dict  # symbol -> list of mode values (floats or Couplings)

    def __post_init__(self):
        for sym in SYMBOLS:
            if sym not in self.modes:
                raise ValueError(f"missing mode list for {sym!r}")
        for sym in ("lam", "mu"):
            vals = np.asarray(self.modes[sym], dtype=float)
            if np.any(vals <= 0.0):
                raise ValueError(f"{sym} modes must be positive")
        for sym in ("lam", "mu", "phi", "rho"):
            vals = np.asarray(self.modes[sym], dtype=float)
            if np.any(np.diff(vals) <= 0.0) and len(vals) > 1:
                raise ValueError(f"{sym} modes must be strictly increasing")

    def n_modes(self, sym: str) -> int:
        return len(self.modes[sym])


@dataclass(frozen=True)
class DeltaState:
    """Current value of the jumping six-tuple plus its composite index."""

    lam: float
    mu: float
    sigma_plus: Coupling
    sigma_minus: Coupling
    phi: float
    rho: float
    mode_index: int = 0

    def __post_init__(self):
        if self.lam <= 0.0 or self.mu <= 0.0:
            raise ValueError("characteristic speeds must be positive")

    @staticmethod
    def from_nominal(nom: NominalParams, mode_index: int = 0) -> "DeltaState":
        return DeltaState(nom.lambda0, nom.mu0, nom.sigma_plus0,
                          nom.sigma_minus0, nom.phi0, nom.rho0_refl,
                          mode_index)


def coupling_terms(delta: DeltaState, nominal: NominalParams, kernels,
                   x: float, xi: float):
    """Target-system coupling coefficients (f1..f4, g1..g4) at (x, xi).

    These vanish identically when delta equals the nominal tuple; their
    growth with the parameter deviation is the empirical content of the
    robustness bound checked in the tests.
    """
    if nominal.phi0 == 0.0:
        raise ValueError("phi0 = 0 makes the inlet reflection singular")
    if nominal.mu0 == 0.0:
        raise ValueError("mu0 = 0 is not allowed")
    if not (0.0 <= xi <= x <= 1.0 + 1e-12):
        raise ValueError("(x, xi) outside the triangle 0 <= xi <= x <= 1")

    lam0, mu0 = nominal.lambda0, nominal.mu0
    phi0 = nominal.phi0
    lam, mu = delta.lam, delta.mu
    sp = float(delta.sigma_plus(np.array([x]))[0])
    sp_xi = float(delta.sigma_plus(np.array([xi]))[0])
    sm = float(delta.sigma_minus(np.array([x]))[0])
    sm_xi = float(delta.sigma_minus(np.array([xi]))[0])
    sp0 = float(nominal.sigma_plus0(np.array([x]))[0])
    sp0_xi = float(nominal.sigma_plus0(np.array([xi]))[0])
    sm0 = float(nominal.sigma_minus0(np.array([x]))[0])
    sm0_xi = float(nominal.sigma_minus0(np.array([xi]))[0])

    kuu = kernels.eval("uu", x, xi)
    kuv = kernels.eval("uv", x, xi)
    kvu = kernels.eval("vu", x, xi)
    kvv = kernels.eval("vv", x, xi)
    kuv_x, kuv_xi = kernels.eval_gradient("uv", x, xi)
    kvu_x, kvu_xi = kernels.eval_gradient("vu", x, xi)
    kuv_0 = kernels.eval("uv", x, 0.0)
    kvu_0 = kernels.eval("vu", x, 0.0)

    f1 = sp - sp0 * (lam + mu) / (lam0 + mu0)
    f2 = (mu - lam * delta.phi * mu0 / (lam0 * phi0)) * kuv_0
    f3 = (lam * sm0_xi / lam0 - sm_xi) * kuv
    f4 = ((lam0 - lam) * kuv_x + (mu - mu0) * kuv_xi - (sp_xi - sp0_xi) * kuu)
    g1 = sm - sm0 * (lam + mu) / (lam0 + mu0)
    g2 = (-lam * delta.phi + mu * lam0 * phi0 / mu0) * kvu_0
    g3 = ((mu - mu0) * kvu_x - (lam - lam0) * kvu_xi
          - (sm_xi - sm0_xi) * kvv)
    g4 = (sp0_xi * mu / mu0 - sp_xi) * kvu
    return f1, f2, f3, f4, g1, g2, g3, g4
