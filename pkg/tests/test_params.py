import numpy as np
import pytest

from jumppde.kernels import solve_kernels
from jumppde.params import (ConstantCoupling, DeltaState, ExponentialCoupling,
                            NominalParams, StochasticParams, TabulatedCoupling,
                            as_coupling, coupling_terms, nominal_from_features)


def test_constant_coupling_evaluates_everywhere():
    c = ConstantCoupling(2.5)
    xs = np.linspace(0.0, 1.0, 7)
    assert np.all(c(xs) == 2.5)
    assert c.at_zero() == 2.5


def test_exponential_coupling_shape():
    c = ExponentialCoupling(3.0, 0.5)
    xs = np.array([0.0, 1.0, 2.0])
    assert np.allclose(c(xs), [3.0, 1.5, 0.75])
    with pytest.raises(ValueError):
        ExponentialCoupling(1.0, 0.0)


def test_tabulated_coupling_interpolates():
    c = TabulatedCoupling([0.0, 1.0], [0.0, 2.0])
    assert np.allclose(c([0.25, 0.5]), [0.5, 1.0])
    with pytest.raises(ValueError):
        TabulatedCoupling([0.0, 1.0], [0.0])


def test_as_coupling_wraps_scalars():
    c = as_coupling(1.5)
    assert isinstance(c, ConstantCoupling)
    assert as_coupling(c) is c


def test_nominal_rejects_nonpositive_speeds():
    with pytest.raises(ValueError):
        NominalParams.constant(0.0, 1.0, 0.1, 0.1, -2.0, 0.5)
    with pytest.raises(ValueError):
        NominalParams.constant(1.0, -1.0, 0.1, 0.1, -2.0, 0.5)


def test_features_round_trip_constant_family():
    nom = NominalParams.constant(1.0, 2.0, 0.3, -0.4, -2.0, 0.5)
    vec = nom.features()
    back = nominal_from_features(vec, "constant")
    assert np.allclose(back.features(), vec)


def test_features_round_trip_traffic_family():
    vec = np.array([0.02, 0.04, 0.0, -1.0 / 60.0, -2.0, 0.4346])
    nom = nominal_from_features(vec, "traffic")
    assert isinstance(nom.sigma_minus0, ExponentialCoupling)
    # the sigma- spatial decay is tied to the outlet reflection
    assert nom.sigma_minus0.base == pytest.approx(0.4346)
    assert np.allclose(nom.features(), vec)
    with pytest.raises(ValueError):
        nominal_from_features(vec, "bogus")


def test_stochastic_params_validation():
    modes = {"lam": [1.0], "mu": [1.0], "sigma_plus": [0.1],
             "sigma_minus": [0.1], "phi": [-2.0], "rho": [0.5]}
    sp = StochasticParams(modes)
    assert sp.n_modes("lam") == 1
    bad = dict(modes)
    bad["lam"] = [2.0, 1.0]
    with pytest.raises(ValueError):
        StochasticParams(bad)
    with pytest.raises(ValueError):
        StochasticParams({k: v for k, v in modes.items() if k != "mu"})


def test_delta_state_from_nominal():
    nom = NominalParams.constant(1.0, 2.0, 0.3, -0.4, -2.0, 0.5)
    d = DeltaState.from_nominal(nom, mode_index=3)
    assert (d.lam, d.mu, d.phi, d.rho) == (1.0, 2.0, -2.0, 0.5)
    assert d.mode_index == 3


class TestCouplingTerms:
    nom = NominalParams.constant(1.0, 1.5, 0.4, 0.6, -2.0, 0.5)

    def kernels(self):
        return solve_kernels(self.nom, 33)

    def test_all_zero_at_nominal(self):
        ks = self.kernels()
        d = DeltaState.from_nominal(self.nom)
        for (x, xi) in [(0.5, 0.25), (1.0, 0.0), (0.75, 0.75)]:
            vals = coupling_terms(d, self.nom, ks, x, xi)
            assert np.allclose(vals, 0.0, atol=1e-12)

    def test_sigma_plus_shift_moves_f1_only(self):
        ks = self.kernels()
        d = DeltaState(1.0, 1.5, ConstantCoupling(0.5), ConstantCoupling(0.6),
                       -2.0, 0.5)
        f1, *_ = coupling_terms(d, self.nom, ks, 0.5, 0.25)
        assert f1 == pytest.approx(0.1)

    def test_phi_perturbation_hand_value(self):
        ks = self.kernels()
        d = DeltaState(1.0, 1.5, ConstantCoupling(0.4), ConstantCoupling(0.6),
                       -1.5, 0.5)
        x = 0.5
        _, _, _, _, _, g2, _, _ = coupling_terms(d, self.nom, ks, x, 0.25)
        # -lam*phi + mu*lam0*phi0/mu0 reduces to lam0*(phi0 - phi) here
        expected = 1.0 * (-2.0 - (-1.5)) * ks.eval("vu", x, 0.0)
        assert g2 == pytest.approx(expected)

    def test_outside_triangle_rejected(self):
        ks = self.kernels()
        d = DeltaState.from_nominal(self.nom)
        with pytest.raises(ValueError):
            coupling_terms(d, self.nom, ks, 0.25, 0.5)
