"""
Command implementations behind the `simulate`, `check` and `compare` sub-commands.

Each command returns a process exit code and writes its artefacts through
OutputWriter into the configured output directory.
"""

import logging
import math
from dataclasses import replace
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from backend.models.output_writer import OutputWriter
from backend.models.run_config import RunConfig
from config.config import save_config_to_file
from forward_curves.errors import CouplingError, CurveDomainError, DegenerateCorrelationError, ModelSpecError
from forward_curves.girsanov import GirsanovDiagnostics
from forward_curves.noise import CovarianceOperator, correlation_matrix, diffusion_operator_report
from forward_curves.operators import MultiplicativeKernel
from forward_curves.pointwise import CoefficientSpec, ConditionEstimator, Domain, Family, PointwiseMap, make_custom
from forward_curves.projection import ProjectionHarness, ProjectionSpec
from forward_curves.solver import EnsembleSimulator
from forward_curves.space_core import CurveGrid

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ALL_BLOWN_UP = 3
EXIT_CHECK_FAILED = 4
EXIT_COUPLING = 5


def _start_run(config_path: str, overrides: Optional[Dict[str, Any]]):
    run_config = RunConfig.from_file(config_path, overrides)
    writer = OutputWriter(run_config.outputs.directory)
    writer.write_json('resolved_config.json', run_config.resolved())
    save_config_to_file(str(writer.directory / 'system_config.json'))
    return run_config, writer


def _diffusion_operator(coeffs: CoefficientSpec, g0: CurveGrid, q: CovarianceOperator) -> Dict[str, Any]:
    """Hilbert-Schmidt norm of the diffusion operator at the initial curve"""
    try:
        kernel = MultiplicativeKernel(coeffs.diffusion_curve(0.0, g0))
    except CurveDomainError as e:
        return {'hs_norm': None, 'reason': str(e)}
    return diffusion_operator_report(q, kernel)


def cmd_simulate(config_path: str, overrides: Optional[Dict[str, Any]] = None) -> int:
    """Simulate an ensemble of curve paths and write curves, summary and resolved config"""
    run_config, writer = _start_run(config_path, overrides)
    girsanov = run_config.girsanov

    space = run_config.build_space()
    q = run_config.build_noise(space)
    coeffs = run_config.build_coefficients()
    g0 = run_config.build_initial_curve(space)
    sim = run_config.build_sim()

    simulated = coeffs
    if girsanov.enabled and girsanov.direction > 0:
        simulated = CoefficientSpec(drift=make_custom('zero'), diffusion=coeffs.diffusion)

    logger.info(f"Simulating {sim.n_paths} paths: dt={sim.dt}, horizon={sim.horizon}, "
                f"space={space.describe()}")
    simulator = EnsembleSimulator()
    ensemble = simulator.simulate_ensemble(g0, simulated, q, sim)

    summary = ensemble.summary()
    summary.update({
        'space': space.describe(),
        'noise': q.describe(),
        'model': coeffs.describe(),
        'sim': sim.describe(),
        'diffusion_operator': _diffusion_operator(coeffs, g0, q),
    })
    if girsanov.enabled:
        summary['girsanov'] = GirsanovDiagnostics(simulator).ensemble_report(
            ensemble, g0, coeffs, q, run_config.girsanov_horizon, girsanov.reweight_x, girsanov.direction)

    for fmt in run_config.outputs.formats:
        writer.write_frame('curves', ensemble.curves_frame(include_rn_weight=girsanov.enabled), fmt)
    writer.write_json('summary.json', summary)

    if ensemble.n_blown_up == ensemble.n_paths:
        logger.error(f"All {ensemble.n_paths} paths blew up")
        return EXIT_ALL_BLOWN_UP
    return EXIT_OK


def _requirements(run_config: RunConfig, diffusion: PointwiseMap) -> List[str]:
    if run_config.check.require is not None:
        return list(run_config.check.require)
    required = ['derivatives', 'lipschitz']
    if diffusion.domain is not Domain.ALL_REALS and diffusion.has_second_order:
        required.append('positivity')
    return required


def _kernel_report(estimator: ConditionEstimator, psi_map: PointwiseMap,
                   n_values: List[float], t_max: float) -> Dict[str, Any]:
    lipschitz = []
    for n in n_values:
        bound = estimator.estimate_local_bound(psi_map, n, t_max)
        lipschitz.append({
            'n': n,
            'L_hat': estimator.estimate_local_lipschitz(psi_map, n, t_max),
            'L_bound': estimator.lipschitz_constant_bound(psi_map, n, t_max),
            'psi_sup': bound.psi_sup,
            'norm_bound': bound.norm_bound,
        })
    return {
        'kernel': psi_map.describe(),
        'lipschitz': lipschitz,
        'growth': estimator.estimate_linear_growth(psi_map, t_max).to_dict(),
        'derivatives': estimator.check_derivative_consistency(psi_map, t_max),
    }


def cmd_check(config_path: str, overrides: Optional[Dict[str, Any]] = None) -> int:
    """Run the lattice condition estimators on the configured coefficients"""
    run_config, writer = _start_run(config_path, overrides)
    check = run_config.check

    try:
        coeffs = run_config.build_coefficients()
    except ModelSpecError as e:
        logger.error(f"Model rejected: {e}")
        writer.write_json('check_report.json', {
            'model': {'family': run_config.model.family, 'params': run_config.model.params},
            'rejected': True,
            'reason': str(e),
            'passed': False,
        })
        return EXIT_CHECK_FAILED

    space = run_config.build_space()
    estimator = ConditionEstimator(space)
    diffusion = coeffs.diffusion
    report: Dict[str, Any] = {
        'space': space.describe(),
        'rejected': False,
        'lipschitz_unsafe': diffusion.lipschitz_unsafe,
        'diffusion': _kernel_report(estimator, diffusion, check.n_values, check.t_max),
        'drift': _kernel_report(estimator, coeffs.drift, check.n_values, check.t_max),
        'diffusion_operator': _diffusion_operator(
            coeffs, run_config.build_initial_curve(space), run_config.build_noise(space)),
    }
    if diffusion.lipschitz_unsafe:
        gamma = diffusion.params.get('gamma')
        report['suggestion'] = (f"Use family 'cev_tilde' with gamma={gamma} and a small eps, which "
                                f"replaces y**gamma near zero by a smooth bridge")

    if diffusion.domain is not Domain.ALL_REALS and diffusion.has_second_order:
        report['positivity'] = estimator.check_positivity_conditions(
            diffusion, check.eps, check.t_max).to_dict()
    else:
        report['positivity'] = None
    if diffusion.family is Family.EXP_FORM and diffusion.base is not None and diffusion.base.has_second_order:
        report['exp_form_positivity'] = estimator.check_exp_form_positivity(
            diffusion.base, check.eps, check.t_max)

    outcomes = {}
    for requirement in _requirements(run_config, diffusion):
        if requirement == 'derivatives':
            outcomes[requirement] = (report['diffusion']['derivatives']['passed']
                                     and report['drift']['derivatives']['passed'])
        elif requirement == 'lipschitz':
            outcomes[requirement] = all(
                math.isfinite(row['L_hat']) and math.isfinite(row['L_bound'])
                for row in report['diffusion']['lipschitz'] + report['drift']['lipschitz']
            )
        elif requirement == 'linear_growth':
            outcomes[requirement] = (report['diffusion']['growth']['verdict']
                                     and report['drift']['growth']['verdict'])
        elif requirement == 'positivity':
            positivity = report['positivity']
            outcomes[requirement] = bool(positivity and positivity['all_passed'])
    report['requirements'] = outcomes
    report['passed'] = all(outcomes.values())
    writer.write_json('check_report.json', report)

    if not report['passed']:
        failed = [name for name, ok in outcomes.items() if not ok]
        logger.warning(f"Condition check failed: {failed}")
        return EXIT_CHECK_FAILED
    return EXIT_OK


def _correlation_report(q: CovarianceOperator, maturities: Sequence[float]) -> Dict[str, Any]:
    try:
        matrix = correlation_matrix(q, 0.0, maturities)
    except DegenerateCorrelationError as e:
        return {'t': 0.0, 'maturities': list(maturities), 'matrix': None, 'reason': str(e)}
    return {'t': 0.0, 'maturities': list(maturities), 'matrix': matrix}


def _exp_model_verdict(corrected: Dict[str, Any], uncorrected: Dict[str, Any]) -> Dict[str, Any]:
    """The corrected sweep converges and beats the uncorrected one by more than 3 SE at the finest dt"""
    gap = uncorrected['finest_mean_discrepancy'] - corrected['finest_mean_discrepancy']
    band = 3 * math.hypot(corrected['finest_se_discrepancy'], uncorrected['finest_se_discrepancy'])
    order = corrected['fitted_order']
    checks = {
        'no_breakdowns': corrected['n_breakdowns'] == 0,
        'positive_order': math.isfinite(order) and order > 0,
        'correction_separates': math.isfinite(gap) and gap > band,
    }
    return {'checks': checks, 'gap': gap, 'band': band, 'passed': all(checks.values())}


def cmd_compare(config_path: str, overrides: Optional[Dict[str, Any]] = None) -> int:
    """Compare projected SPDE paths with the fixed-delivery SDE for each configured maturity"""
    run_config, writer = _start_run(config_path, overrides)
    compare = run_config.compare

    space = run_config.build_space()
    q = run_config.build_noise(space)
    coeffs = run_config.build_coefficients()
    g0 = run_config.build_initial_curve(space)
    sim = run_config.build_sim(snapshot_stride=1)

    maturities = compare.maturities or [sim.horizon]
    simulator = EnsembleSimulator()
    harness = ProjectionHarness(simulator)

    try:
        specs = [ProjectionSpec.from_curve(g0, T, coeffs, q, compare.absorb_at_zero) for T in maturities]
        for spec in specs:
            if space.node_index(spec.T) is None:
                raise CouplingError(f"Maturity T={spec.T} is not a grid node (dx={space.dx})")
        ensemble = simulator.simulate_ensemble(g0, coeffs, q, sim)

        reports, paths_frames, convergence_frames = [], [], []
        for spec in specs:
            projection = harness.compare_projection(ensemble, spec, sim)
            entry = projection.to_dict()
            paths_frames.append(projection.frame)
            if compare.levels >= 2:
                table, order = harness.convergence_table(g0, spec, sim, compare.levels)
                convergence_frames.append(pd.DataFrame({
                    'check': 'projection',
                    'T': spec.T,
                    'dt': table['dt'],
                    'mean_error': table['mean_sup_error'],
                    'max_error': table['max_sup_error'],
                    'se_error': table['se_sup_error'],
                }))
                entry['fitted_order'] = order
            reports.append(entry)
    except CouplingError as e:
        logger.error(f"Coupling refused: {e}")
        writer.write_json('compare_report.json', {'coupling_refused': True, 'reason': str(e), 'passed': False})
        return EXIT_COUPLING

    result: Dict[str, Any] = {
        'maturities': reports,
        'coupling_refused': False,
        'correlation': _correlation_report(q, maturities),
    }
    verdicts = [entry['passed'] for entry in reports]
    if compare.exp_check:
        exp_sim = replace(sim, snapshot_stride=sim.n_steps)
        result['exp_model'] = {}
        for include_correction in (True, False):
            table, order = simulator.exp_model_sweep(g0, coeffs, q, exp_sim, compare.exp_levels,
                                                     include_correction)
            label = 'exp_model' if include_correction else 'exp_model_no_correction'
            convergence_frames.append(pd.DataFrame({
                'check': label,
                'T': float('nan'),
                'dt': table['dt'],
                'mean_error': table['mean_discrepancy'],
                'max_error': table['max_discrepancy'],
                'se_error': table['se_discrepancy'],
            }))
            result['exp_model'][label] = {
                'fitted_order': order,
                'n_breakdowns': int(table['n_breakdowns'].sum()),
                'finest_mean_discrepancy': float(table['mean_discrepancy'].iloc[-1]),
                'finest_se_discrepancy': float(table['se_discrepancy'].iloc[-1]),
            }
        result['exp_model_verdict'] = _exp_model_verdict(result['exp_model']['exp_model'],
                                                         result['exp_model']['exp_model_no_correction'])
        verdicts.append(result['exp_model_verdict']['passed'])

    result['passed'] = all(verdicts)
    for fmt in run_config.outputs.formats:
        writer.write_frame('fixed_maturity', pd.concat(paths_frames, ignore_index=True), fmt)
        if convergence_frames:
            writer.write_frame('convergence', pd.concat(convergence_frames, ignore_index=True), fmt)
    writer.write_json('compare_report.json', result)

    if not result['passed']:
        logger.warning("Comparison failed its standard-error checks")
        return EXIT_CHECK_FAILED
    return EXIT_OK
