import numpy as np
import pytest

from jumppde.kernels import solve_kernels
from jumppde.traffic import arz_nominal, build_scenario


@pytest.fixture(scope="session")
def traffic_scenario():
    return build_scenario()


@pytest.fixture(scope="session")
def traffic_nom(traffic_scenario):
    return arz_nominal(traffic_scenario.nominal_tp)


@pytest.fixture(scope="session")
def traffic_kernels64(traffic_nom):
    return solve_kernels(traffic_nom, 64)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
