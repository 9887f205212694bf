import dataclasses
import math

import numpy as np
import pytest

from config.config import config
from forward_curves.errors import CapabilityError, CevParameterError, CurveDomainError, ModelSpecError
from forward_curves.pointwise import (
    FORMULA_REGISTRY,
    CoefficientSpec,
    ConditionEstimator,
    ConstantBeta,
    Domain,
    Family,
    PointwiseMap,
    SeasonalBeta,
    as_beta,
    lift,
    make_cev,
    make_cev_tilde,
    make_custom,
    make_exp_form,
    make_separable,
)
from forward_curves.space_core import CurveGrid, norm


@pytest.fixture
def estimator(space):
    return ConditionEstimator(space)


def test_lift_identity_and_square(space, saturating):
    f = saturating(space)
    lifted = lift(make_custom('identity'), 0.0, f)
    np.testing.assert_array_equal(lifted.values, f.values)
    assert lifted.tail == f.tail
    np.testing.assert_array_equal(lift(make_custom('square'), 0.3, CurveGrid.constant(space, 3.0)).values, 9.0)


def test_lift_cev_gamma2(space):
    f = CurveGrid.from_function(space, lambda x: 1 + np.exp(-x), tail=1.0)
    lifted = lift(make_cev(2.0), 0.5, f)
    np.testing.assert_allclose(lifted.values, (1 + np.exp(-space.nodes)) ** 2, rtol=1e-15)
    assert lifted.tail == 1.0


def test_lift_reports_offending_node(space):
    values = np.ones(space.n_nodes)
    values[17] = -0.5
    with pytest.raises(CurveDomainError) as err:
        lift(make_cev(2.0), 0.0, CurveGrid(values, space, 1.0))
    assert err.value.node == 17
    assert err.value.value == -0.5


def test_lift_reports_negative_tail(space):
    with pytest.raises(CurveDomainError) as err:
        lift(make_cev(1.0), 0.0, CurveGrid(np.ones(space.n_nodes), space, -1.0))
    assert err.value.node == 'tail'


def test_lift_rejects_negative_time(space):
    with pytest.raises(CurveDomainError):
        lift(make_custom('identity'), -0.1, CurveGrid.constant(space, 1.0))


def test_cev_values_and_derivatives():
    cev = make_cev(2.0)
    assert cev(0.0, 3.0) == 9.0
    assert cev.derivative_y(0.0, 3.0) == 6.0
    assert cev.domain is Domain.NONNEG
    assert not cev.lipschitz_unsafe

    geometric = make_cev(1.0, 0.3)
    np.testing.assert_allclose(geometric(0.7, np.array([1.0, 2.0])), [0.3, 0.6], rtol=1e-15)


def test_cev_rejects_small_gamma_with_rationale():
    with pytest.raises(CevParameterError, match='norm blows up'):
        make_cev(0.5)


@pytest.mark.parametrize('gamma,unsafe', [(1.0, False), (1.5, True), (1.99, True), (2.0, False), (3.0, False)])
def test_cev_lipschitz_flag(gamma, unsafe):
    assert make_cev(gamma).lipschitz_unsafe is unsafe


def test_cev_tilde_bridge():
    eps = 0.05
    psi = make_cev_tilde(1.5, eps)
    y_small = np.linspace(0.0, eps, 11)
    np.testing.assert_array_equal(psi(0.0, y_small), y_small)
    assert psi(0.0, 4 * eps) == pytest.approx((4 * eps) ** 1.5, rel=1e-14)
    assert not psi.lipschitz_unsafe
    with pytest.raises(CevParameterError):
        make_cev_tilde(1.0, eps)
    with pytest.raises(ModelSpecError):
        make_cev_tilde(1.5, 0.0)


def test_cev_tilde_is_locally_lipschitz(estimator):
    psi = make_cev_tilde(1.5, 0.05)
    for n in (1.0, 2.0, 8.0):
        assert math.isfinite(estimator.estimate_local_lipschitz(psi, n, 1.0))
    assert estimator.check_derivative_consistency(psi, 1.0)['passed']


def test_exp_form_geometric_case():
    psi = make_exp_form(make_custom('constant', value=0.2))
    assert psi.family is Family.EXP_FORM
    assert psi.domain is Domain.NONNEG
    np.testing.assert_allclose(psi(0.0, np.array([0.0, 1.0, 5.0])), [0.0, 0.2, 1.0], rtol=1e-15)


def test_exp_form_product_rule():
    psi = make_exp_form(make_custom('exp_decay'))
    y = np.linspace(0.0, 6.0, 25)
    np.testing.assert_allclose(psi(0.0, y), y * np.exp(-y), rtol=1e-14)
    np.testing.assert_allclose(psi.derivative_y(0.0, y), np.exp(-y) * (1 - y), rtol=1e-12, atol=1e-15)


def test_exp_form_bounded_tilde_has_linear_growth(estimator):
    psi = make_exp_form(make_custom('exp_decay'))
    assert estimator.estimate_linear_growth(psi, 1.0).verdict


def test_separable_uses_beta_and_phi(estimator):
    beta = SeasonalBeta(level=1.0, amplitude=0.5, period=1.0)
    psi = make_separable(beta, make_custom('sine'))
    assert psi.family is Family.SEPARABLE
    assert psi(0.25, math.pi / 2) == pytest.approx(1.0, abs=1e-12)
    assert psi(0.0, math.pi / 2) == pytest.approx(1.5)
    assert estimator.estimate_local_lipschitz(psi, 1.0, 1.0) == pytest.approx(1.5, rel=1e-12)


def test_beta_parsing():
    assert as_beta(0.3) == ConstantBeta(0.3)
    assert isinstance(as_beta({'kind': 'seasonal', 'level': 1.0, 'amplitude': 0.2}), SeasonalBeta)
    with pytest.raises(ModelSpecError):
        SeasonalBeta(level=1.0, amplitude=1.0)
    with pytest.raises(ModelSpecError):
        as_beta({'kind': 'weekly', 'level': 1.0})


def test_custom_formula_registry():
    with pytest.raises(ModelSpecError):
        make_custom('cubic')
    with pytest.raises(ModelSpecError):
        make_custom('sqrt', domain='all_reals')
    narrowed = make_custom('shifted_linear', domain='nonneg')
    assert narrowed.domain is Domain.NONNEG


def test_coefficient_spec_domains():
    CoefficientSpec(drift=make_custom('zero'), diffusion=make_cev(2.0))
    with pytest.raises(ModelSpecError):
        CoefficientSpec(drift=make_custom('sqrt'), diffusion=make_custom('identity'))


def test_pos_domain_uses_limit_at_zero():
    psi = make_exp_form(make_custom('sqrt'))
    assert psi.domain is Domain.POS
    assert psi(0.0, 0.0) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(CurveDomainError):
        make_custom('sqrt').derivative_y(0.0, 0.0)


def test_local_lipschitz_estimates(estimator):
    assert estimator.estimate_local_lipschitz(make_custom('identity'), 1.0, 1.0) == 1.0
    assert estimator.estimate_local_lipschitz(make_custom('square'), 1.0, 1.0) == pytest.approx(2 * math.sqrt(2))
    assert estimator.estimate_local_lipschitz(make_custom('sqrt'), 1.0, 1.0) == math.inf
    assert estimator.estimate_local_lipschitz(make_custom('sqrt'), 5.0, 1.0) == math.inf
    with pytest.raises(ValueError):
        estimator.estimate_local_lipschitz(make_custom('identity'), 0.0, 1.0)


def test_linear_growth_estimates(estimator):
    identity = estimator.estimate_linear_growth(make_custom('identity'), 1.0)
    assert identity.verdict
    assert identity.g_hat == pytest.approx(1.0, rel=1e-2)
    assert identity.deriv_sup == 1.0

    assert not estimator.estimate_linear_growth(make_custom('square'), 1.0).verdict

    sine = estimator.estimate_linear_growth(make_custom('sine'), 1.0)
    assert sine.verdict
    assert sine.deriv_sup == pytest.approx(1.0)
    assert 'G_hat' in sine.to_dict()


def test_local_bound_and_lipschitz_constant(estimator, space):
    bound = estimator.estimate_local_bound(make_custom('identity'), 2.0, 1.0)
    assert bound.psi_sup == pytest.approx(2.0 * space.k_delta)
    assert bound.deriv_sup == 1.0
    k = space.k_delta
    assert estimator.lipschitz_constant_bound(make_custom('identity'), 2.0, 1.0) == pytest.approx(
        math.sqrt(k ** 2 + 2))
    assert estimator.lipschitz_constant_bound(make_cev(1.5), 1.0, 1.0) == math.inf
    assert math.isfinite(estimator.lipschitz_constant_bound(make_cev(2.0), 1.0, 1.0))


def test_derivative_consistency_flags_wrong_derivative(estimator):
    assert estimator.check_derivative_consistency(make_cev(2.0), 1.0)['passed']
    broken = PointwiseMap(psi=lambda t, y: np.asarray(y) ** 2, d_psi_dy=lambda t, y: np.asarray(y) * 3.0)
    report = estimator.check_derivative_consistency(broken, 1.0)
    assert not report['passed']
    assert report['max_relative_error'] > 0.1


@pytest.mark.parametrize('gamma', [1.0, 2.0, 3.0])
def test_cev_positivity_conditions_pass(estimator, gamma):
    report = estimator.check_positivity_conditions(make_cev(gamma), 0.1, 1.0)
    assert report.all_passed
    assert report.inf_slope >= 0
    assert report.inf_curvature >= 0


def test_seasonal_cev_positivity_conditions_pass(estimator):
    psi = make_cev(2.0, SeasonalBeta(level=0.3, amplitude=0.1))
    assert estimator.check_positivity_conditions(psi, 0.1, 2.0).all_passed


def test_shifted_linear_fails_zero_set(estimator):
    report = estimator.check_positivity_conditions(make_custom('shifted_linear', domain='nonneg'), 0.1, 1.0)
    assert not report.zero_set_ok
    assert not report.all_passed


def test_positivity_needs_restricted_domain_and_derivatives(estimator):
    with pytest.raises(ModelSpecError):
        estimator.check_positivity_conditions(make_custom('identity'), 0.1, 1.0)
    bare = PointwiseMap(psi=lambda t, y: np.asarray(y), d_psi_dy=lambda t, y: np.ones_like(np.asarray(y)),
                        domain=Domain.NONNEG)
    with pytest.raises(CapabilityError):
        estimator.check_positivity_conditions(bare, 0.1, 1.0)


def test_exp_form_positivity(estimator):
    result = estimator.check_exp_form_positivity(make_custom('constant', value=0.2), 0.1, 1.0)
    assert result['all_passed']
    assert estimator.check_exp_form_positivity(make_custom('constant', value=-0.2), 0.1, 1.0)['all_passed'] is False


def _curve_with_norm(space, rng, target):
    a, b, r = rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.2, 3)
    f = CurveGrid.from_function(space, lambda x: a + b * np.exp(-r * x), tail=a)
    return f * (target / norm(f))


def test_lifted_square_respects_lipschitz_constant(estimator, space, rng):
    psi = make_custom('square')
    n = 1.0
    lipschitz = estimator.lipschitz_constant_bound(psi, n, 1.0)
    assert math.isfinite(lipschitz)
    for _ in range(100):
        f = _curve_with_norm(space, rng, rng.uniform(0.1, n))
        g = _curve_with_norm(space, rng, rng.uniform(0.1, n))
        gap = norm(lift(psi, 0.0, f) - lift(psi, 0.0, g))
        assert gap <= lipschitz * norm(f - g) * (1 + 1e-2)


def test_lift_is_local(space, saturating, rng):
    psi = make_cev(2.0, 0.3)
    f = saturating(space) + CurveGrid.constant(space, 1.0)
    base = lift(psi, 0.4, f)
    for idx in rng.choice(space.n_nodes, size=10, replace=False):
        values = f.values.copy()
        values[idx] += 0.5
        bumped = lift(psi, 0.4, CurveGrid(values, space, f.tail))
        changed = np.flatnonzero(bumped.values != base.values)
        np.testing.assert_array_equal(changed, [idx])
        assert bumped.tail == base.tail
    moved_tail = lift(psi, 0.4, CurveGrid(f.values, space, 3.0))
    np.testing.assert_array_equal(moved_tail.values, base.values)


@pytest.mark.parametrize('formula', sorted(FORMULA_REGISTRY))
def test_registered_formulas_have_consistent_derivatives(estimator, formula):
    report = estimator.check_derivative_consistency(make_custom(formula), 1.0)
    assert report['passed'], report


@pytest.mark.parametrize('psi', [
    make_cev(1.0, 0.3),
    make_cev(1.5),
    make_cev(3.0, SeasonalBeta(level=0.3, amplitude=0.1)),
    make_cev_tilde(2.5, 0.1),
    make_exp_form(make_custom('exp_decay')),
    make_exp_form(make_custom('sqrt')),
    make_separable(SeasonalBeta(level=1.0, amplitude=0.5), make_custom('sine')),
], ids=lambda psi: psi.name)
def test_families_have_consistent_derivatives(estimator, psi):
    report = estimator.check_derivative_consistency(psi, 2.0)
    assert report['passed'], report


def test_lipschitz_estimate_is_stable_under_lattice_refinement(space):
    psi = make_cev_tilde(1.5, 0.05)
    coarse = ConditionEstimator(space)
    fine = ConditionEstimator(space, dataclasses.replace(config.lattice, n_y=2 * config.lattice.n_y))
    tol = config.lattice.growth_tolerance
    for n in (1.0, 4.0):
        previous = coarse.estimate_local_lipschitz(psi, n, 1.0)
        current = fine.estimate_local_lipschitz(psi, n, 1.0)
        assert abs(current - previous) <= tol * max(previous, current)
