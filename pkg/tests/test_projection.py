import math

import numpy as np
import pytest

from forward_curves.errors import CouplingError, StepError
from forward_curves.noise import CovarianceOperator, NoiseStream
from forward_curves.pointwise import CoefficientSpec, make_cev, make_custom, zero_coefficients
from forward_curves.projection import COUPLED, INDEPENDENT, ProjectionHarness, ProjectionSpec, _compare_samples
from forward_curves.solver import EnsembleSimulator, SimConfig
from forward_curves.space_core import CurveGrid, SpaceConfig


@pytest.fixture
def harness():
    return ProjectionHarness(EnsembleSimulator(max_workers=2))


@pytest.fixture
def unit_curve(space):
    return CurveGrid.constant(space, 1.0)


def test_sde_step_single_eigenpair(space, unit_curve, one_factor, geometric, harness):
    spec = ProjectionSpec.from_curve(unit_curve, 1.0, geometric(1.0), one_factor(space, 0.09))
    assert spec.F0 == 1.0
    assert harness.sde_step(1.0, 0.0, spec, 0.01, 1.0) == pytest.approx(1.03, rel=1e-14)


def test_sde_step_absorbs_at_zero(space, unit_curve, one_factor, geometric, harness):
    spec = ProjectionSpec.from_curve(unit_curve, 1.0, geometric(1.0), one_factor(space))
    assert spec.absorbs(0.0)
    assert harness.sde_step(0.0, 0.0, spec, 0.01, 2.5) == 0.0
    assert harness.sde_step(0.01, 0.0, spec, 0.01, -100.0) == 0.0

    open_spec = ProjectionSpec.from_curve(unit_curve, 1.0, geometric(1.0), one_factor(space),
                                          absorb_at_zero=False)
    assert not open_spec.absorbs(0.0)


def test_sde_step_outside_domain(space, unit_curve, one_factor, harness):
    spec = ProjectionSpec.from_curve(unit_curve, 1.0, CoefficientSpec(make_custom('zero'), make_cev(2.0)),
                                     one_factor(space))
    with pytest.raises(StepError):
        harness.sde_step(-1.0, 0.0, spec, 0.01, 0.0)


def test_projection_spec_rejects_non_positive_maturity(unit_curve, one_factor, geometric, space):
    with pytest.raises(ValueError):
        ProjectionSpec.from_curve(unit_curve, 0.0, geometric(), one_factor(space))


def test_zero_coefficients_keep_F_constant(space, saturating, one_factor, harness):
    spec = ProjectionSpec.from_curve(saturating(space), 2.0, zero_coefficients(), one_factor(space))
    ensemble = harness.simulate_F(spec, SimConfig(dt=0.1, horizon=1.0, n_paths=5))
    assert spec.F0 == pytest.approx(1 - math.exp(-2.0), abs=1e-10)
    np.testing.assert_array_equal(ensemble.values, spec.F0)
    assert ensemble.values.shape == (5, 11)


def test_coupled_noise_is_the_spde_gaussian(space, unit_curve, one_factor, harness):
    coeffs = CoefficientSpec(drift=make_custom('zero'), diffusion=make_custom('constant', value=1.0))
    spec = ProjectionSpec.from_curve(unit_curve, 1.0, coeffs, one_factor(space, 0.09))
    sim = SimConfig(dt=0.04, horizon=1.0, n_paths=3, master_seed=5)
    ensemble = harness.simulate_F(spec, sim, COUPLED)
    for row, path_id in enumerate(ensemble.path_ids):
        z = NoiseStream(5, path_id).normals(sim.n_steps, 1)[:, 0]
        recovered = np.diff(ensemble.values[row]) / (0.3 * math.sqrt(sim.dt))
        np.testing.assert_allclose(recovered, z, rtol=1e-10, atol=1e-12)


def test_coupled_mode_needs_horizon_within_maturity(space, unit_curve, one_factor, geometric, harness):
    spec = ProjectionSpec.from_curve(unit_curve, 0.5, geometric(), one_factor(space))
    with pytest.raises(CouplingError):
        harness.simulate_F(spec, SimConfig(dt=0.1, horizon=1.0), COUPLED)
    with pytest.raises(ValueError):
        harness.simulate_F(spec, SimConfig(dt=0.1, horizon=0.5), 'antithetic')


def test_independent_mode_is_a_martingale(space, unit_curve, one_factor, geometric, harness):
    spec = ProjectionSpec.from_curve(unit_curve, 1.0, geometric(1.0), one_factor(space))
    ensemble = harness.simulate_F(spec, SimConfig(dt=0.05, horizon=1.0, n_paths=10_000, master_seed=3),
                                  INDEPENDENT)
    means, ses = ensemble.mean_path()
    assert np.all(np.abs(means - 1.0) <= 3 * ses + 1e-12)


def test_independent_mode_has_lognormal_variance(space, unit_curve, one_factor, geometric, harness):
    spec = ProjectionSpec.from_curve(unit_curve, 1.0, geometric(1.0), one_factor(space, 0.09))
    ensemble = harness.simulate_F(spec, SimConfig(dt=0.01, horizon=1.0, n_paths=20_000, master_seed=17))
    stats = ensemble.terminal_stats()
    assert stats['n'] == 20_000
    assert abs(stats['mean'] - 1.0) <= 3 * stats['se_mean']
    assert stats['var'] == pytest.approx(math.exp(0.09) - 1.0, rel=0.05)

    frame = ensemble.to_frame()
    assert list(frame.columns) == ['path_id', 't', 'T', 'F']
    assert len(frame) == 20_000 * 101


def test_compare_projection_geometric_is_pathwise_exact(space, unit_curve, one_factor, geometric, harness):
    q = one_factor(space, 0.09)
    sim = SimConfig(dt=0.05, horizon=1.0, n_paths=50, master_seed=7, snapshot_stride=1)
    g_paths = harness.simulator.simulate_ensemble(unit_curve, geometric(1.0), q, sim)
    spec = ProjectionSpec.from_curve(unit_curve, 1.0, geometric(1.0), q)
    report = harness.compare_projection(g_paths, spec, sim)
    assert max(report.pathwise_sup) < 1e-10
    assert report.passed
    assert report.terminal['n'] == 50
    assert list(report.frame.columns) == ['path_id', 't', 'T', 'F_sde', 'F_spde_projected', 'abs_diff']
    assert report.to_dict()['pathwise_sup_max'] < 1e-10


def test_compare_projection_zero_coefficients(space, saturating, one_factor, harness):
    g0 = saturating(space)
    q = one_factor(space)
    sim = SimConfig(dt=0.1, horizon=1.0, n_paths=3, snapshot_stride=1)
    g_paths = harness.simulator.simulate_ensemble(g0, zero_coefficients(), q, sim)
    report = harness.compare_projection(g_paths, ProjectionSpec.from_curve(g0, 2.0, zero_coefficients(), q), sim)
    assert max(report.pathwise_sup) == pytest.approx(0.0, abs=1e-12)
    assert report.passed


def test_compare_projection_cev_gamma2(space, one_factor, harness):
    g0 = CurveGrid.constant(space, 0.5)
    q = one_factor(space, 0.09)
    coeffs = CoefficientSpec(drift=make_custom('zero'), diffusion=make_cev(2.0, 0.3))
    sim = SimConfig(dt=0.05, horizon=1.0, n_paths=200, master_seed=21, snapshot_stride=2)
    g_paths = harness.simulator.simulate_ensemble(g0, coeffs, q, sim)
    report = harness.compare_projection(g_paths, ProjectionSpec.from_curve(g0, 1.0, coeffs, q), sim)
    assert report.passed
    assert report.terminal['mean_agrees']


def test_compare_projection_refuses_unsafe_coupling(space, unit_curve, one_factor, geometric, harness):
    q = one_factor(space)
    sim = SimConfig(dt=0.1, horizon=1.0, n_paths=2)
    g_paths = harness.simulator.simulate_ensemble(unit_curve, geometric(), q, sim)

    with pytest.raises(CouplingError, match='grid node'):
        harness.compare_projection(g_paths, ProjectionSpec.from_curve(unit_curve, 1.005, geometric(), q), sim)
    with pytest.raises(CouplingError, match='horizon'):
        harness.compare_projection(g_paths, ProjectionSpec.from_curve(unit_curve, 0.5, geometric(), q), sim)

    off_grid = SimConfig(dt=0.025, horizon=1.0, n_paths=2)
    off_paths = harness.simulator.simulate_ensemble(unit_curve, geometric(), q, off_grid)
    with pytest.raises(CouplingError, match='multiple'):
        harness.compare_projection(off_paths, ProjectionSpec.from_curve(unit_curve, 1.0, geometric(), q), off_grid)

    reseeded = SimConfig(dt=0.1, horizon=1.0, n_paths=2, master_seed=sim.master_seed + 1)
    with pytest.raises(CouplingError, match='master_seed'):
        harness.compare_projection(g_paths, ProjectionSpec.from_curve(unit_curve, 1.0, geometric(), q), reseeded)


def test_convergence_table_shrinks_under_dt_halving(space, unit_curve, one_factor, geometric, harness):
    q = one_factor(space, 0.09)
    spec = ProjectionSpec.from_curve(unit_curve, 0.8, geometric(1.0), q)
    sim = SimConfig(dt=0.08, horizon=0.8, n_paths=60, master_seed=4)
    frame, order = harness.convergence_table(unit_curve, spec, sim, levels=4)
    assert list(frame['dt']) == pytest.approx([0.08, 0.04, 0.02, 0.01])
    assert list(frame['steps_per_reference_step']) == [8, 4, 2, 1]
    errors = frame['mean_sup_error'].to_numpy()
    assert np.all(np.diff(errors) < 0)
    assert errors[-1] == pytest.approx(0.0, abs=1e-10)
    assert order >= 0.4


def test_convergence_table_needs_node_multiple_finest_dt(space, unit_curve, one_factor, geometric, harness):
    spec = ProjectionSpec.from_curve(unit_curve, 1.0, geometric(), one_factor(space))
    with pytest.raises(CouplingError):
        harness.convergence_table(unit_curve, spec, SimConfig(dt=0.01, horizon=1.0), levels=2)


def test_coupled_increment_correlation(fine_space, saturating, harness):
    q = CovarianceOperator(fine_space, (0.5, 0.5), (CurveGrid.constant(fine_space, 1.0), saturating(fine_space)))
    result = harness.coupled_increment_correlation(q, 0.0, 0.0, 1e6, n_samples=100_000, master_seed=9)
    assert result['rho'] == pytest.approx(1 / math.sqrt(2))
    assert abs(result['rho_hat'] - result['rho']) <= 3 * result['se']


def test_terminal_comparison_checks_variance():
    rng = np.random.default_rng(3)
    narrow, wide = rng.normal(1.0, 0.1, 5_000), rng.normal(1.0, 0.3, 5_000)
    mismatch = _compare_samples(narrow, wide)
    assert mismatch['mean_agrees']
    assert not mismatch['var_agrees']
    assert mismatch['var_gap'] < 0

    same = _compare_samples(narrow, narrow.copy())
    assert same['mean_agrees'] and same['var_agrees']
    assert not _compare_samples(narrow[:1], wide[:1])['var_agrees']


@pytest.fixture
def dyadic_space():
    """x_max = 2 with dx = 2**-10, so every dt in the dyadic sweep is a node multiple"""
    return SpaceConfig(weight_param=1.0, x_max=2.0, n_nodes=2 ** 11 + 1)


@pytest.mark.slow
def test_convergence_order_over_dyadic_steps(dyadic_space, one_factor, geometric, harness):
    g0 = CurveGrid.constant(dyadic_space, 1.0)
    q = one_factor(dyadic_space, 0.09)
    spec = ProjectionSpec.from_curve(g0, 1.0, geometric(1.0), q)
    sim = SimConfig(dt=2.0 ** -6, horizon=1.0, n_paths=100, master_seed=4)
    frame, order = harness.convergence_table(g0, spec, sim, levels=5)
    assert list(frame['dt']) == pytest.approx([2.0 ** -k for k in range(6, 11)])
    errors = frame['mean_sup_error'].to_numpy()
    assert np.all(np.diff(errors[:-1]) < 0)
    assert order >= 0.4


@pytest.mark.slow
def test_terminal_moments_at_full_scale(space, unit_curve, one_factor, geometric, harness):
    spec = ProjectionSpec.from_curve(unit_curve, 1.0, geometric(1.0), one_factor(space, 0.09))
    ensemble = harness.simulate_F(spec, SimConfig(dt=0.01, horizon=1.0, n_paths=100_000, master_seed=23))
    stats = ensemble.terminal_stats()
    assert stats['n'] == 100_000
    assert abs(stats['mean'] - 1.0) <= 3 * stats['se_mean']
    assert stats['var'] == pytest.approx(math.exp(0.09) - 1.0, rel=0.05)
