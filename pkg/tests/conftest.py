import numpy as np
import pytest

from forward_curves.noise import CovarianceOperator
from forward_curves.pointwise import CoefficientSpec, make_cev, make_custom
from forward_curves.space_core import CurveGrid, SpaceConfig


@pytest.fixture
def space():
    """x_max = 10 with dx = 0.01"""
    return SpaceConfig(weight_param=1.0, x_max=10.0, n_nodes=1001)


@pytest.fixture
def coarse_space():
    """x_max = 10 with dx = 0.1, for Monte Carlo tests"""
    return SpaceConfig(weight_param=1.0, x_max=10.0, n_nodes=101)


@pytest.fixture
def fine_space():
    """x_max = 20 with dx = 0.005, for quadrature checks against closed forms"""
    return SpaceConfig(weight_param=1.0, x_max=20.0, n_nodes=4001)


@pytest.fixture
def saturating():
    """f(x) = 1 - exp(-x) with tail 1"""
    def build(space):
        return CurveGrid.from_function(space, lambda x: 1.0 - np.exp(-x), tail=1.0)
    return build


@pytest.fixture
def one_factor():
    """Single eigenpair with a constant eigenfunction"""
    def build(space, lam=0.09):
        return CovarianceOperator.from_shapes(space, [{'lambda': lam, 'shape': 'const'}])
    return build


@pytest.fixture
def geometric():
    """Zero drift, psi(t, y) = beta y"""
    def build(beta=1.0):
        return CoefficientSpec(drift=make_custom('zero'), diffusion=make_cev(1.0, beta))
    return build


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
