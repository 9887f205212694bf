"""
Measure-change diagnostics: phi = sigma^-1 alpha via kernel inversion, a Monte
Carlo estimate of the Novikov expectation and log Radon-Nikodym weights along
simulated paths. Integrals over time use the left-endpoint (Ito) rule.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional

import numpy as np

from config.config import config
from forward_curves.errors import CapabilityError, InvertibilityError
from forward_curves.noise import CovarianceOperator, sample_increment
from forward_curves.operators import MultiplicativeKernel, invert_kernel, mult_apply
from forward_curves.pointwise import CoefficientSpec, make_custom
from forward_curves.solver import EnsembleSimulator, PathEnsemble, PathResult, SimConfig
from forward_curves.space_core import CurveGrid, delta_eval, inner_product, norm

logger = logging.getLogger(__name__)


def phi_curve(t: float, g: CurveGrid, coeffs: CoefficientSpec) -> CurveGrid:
    """phi(t) = M_{Psi(t, g)}^-1 alpha(t, g), node-wise alpha / Psi"""
    drift = coeffs.drift_curve(t, g)
    if not np.any(drift.values) and drift.tail == 0:
        return drift
    kernel = MultiplicativeKernel(coeffs.diffusion_curve(t, g))
    return mult_apply(invert_kernel(kernel), drift)


@dataclass(frozen=True, eq=False)
class GirsanovSpec:
    coeffs: CoefficientSpec
    horizon: float

    def non_invertible_times(self, path: PathResult) -> List[float]:
        """Snapshot times up to the horizon where the diffusion kernel leaves H_> and H_<"""
        times = []
        for t, g in path.snapshots:
            if t > self.horizon:
                break
            if not MultiplicativeKernel(self.coeffs.diffusion_curve(t, g)).invertible:
                times.append(t)
        return times


@dataclass
class NovikovEstimate:
    mc_estimate: Optional[float]
    overflow: bool
    per_path_integrals: List[float] = field(default_factory=list)
    failed_paths: List[int] = field(default_factory=list)
    se: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'mc_estimate': self.mc_estimate,
            'overflow': self.overflow,
            'se': self.se,
            'n_paths': len(self.per_path_integrals),
            'failed_paths': self.failed_paths,
            'max_exponent': 0.5 * max(self.per_path_integrals) if self.per_path_integrals else None,
        }


class _PhiIntegral:
    """Accumulates sum_k ||phi(t_k)||^2 dt along one path"""

    def __init__(self, coeffs: CoefficientSpec, dt: float):
        self.coeffs = coeffs
        self.dt = dt
        self.total = 0.0
        self.error: Optional[Exception] = None

    def __call__(self, k: int, t: float, g: CurveGrid, z: np.ndarray):
        if self.error is not None:
            return
        try:
            self.total += norm(phi_curve(t, g, self.coeffs)) ** 2 * self.dt
        except InvertibilityError as e:
            self.error = e
            logger.warning(f"phi undefined at t={t}: {e}")


class GirsanovDiagnostics:
    """Novikov estimates and Radon-Nikodym weights for the drift/diffusion pair."""

    def __init__(self, simulator: Optional[EnsembleSimulator] = None):
        self.simulator = simulator or EnsembleSimulator()
        self.overflow_exponent = config.girsanov.overflow_exponent
        self.logger = logging.getLogger(__name__)

    def novikov_estimate(self, g0: CurveGrid, coeffs: CoefficientSpec, q: CovarianceOperator,
                         sim: SimConfig, T_bar: float) -> NovikovEstimate:
        """E[exp(1/2 int_0^T_bar ||phi(t)||^2 dt)] along paths of the driftless SPDE"""
        try:
            if not 0 < T_bar <= sim.horizon + 1e-12:
                raise ValueError(f"T_bar must lie in (0, horizon], got {T_bar}")
            sim_bar = replace(sim, horizon=T_bar, snapshot_stride=max(1, round(T_bar / sim.dt)))
            driftless = CoefficientSpec(drift=make_custom('zero'), diffusion=coeffs.diffusion)

            integrals: Dict[int, _PhiIntegral] = {}

            def observer(path_id: int) -> _PhiIntegral:
                integrals[path_id] = _PhiIntegral(coeffs, sim.dt)
                return integrals[path_id]

            ensemble = self.simulator.simulate_ensemble(g0, driftless, q, sim_bar, observer_factory=observer)

            per_path, failed = [], []
            for path in ensemble.paths:
                acc = integrals[path.path_id]
                if acc.error is not None or not path.survived:
                    failed.append(path.path_id)
                    continue
                per_path.append(acc.total)

            exponents = 0.5 * np.array(per_path)
            overflow = bool(exponents.size and np.max(exponents) > self.overflow_exponent)
            if overflow or exponents.size == 0:
                estimate, se = None, None
            else:
                weights = np.exp(exponents)
                estimate = float(weights.mean())
                se = float(weights.std(ddof=1) / math.sqrt(weights.size)) if weights.size > 1 else 0.0

            result = NovikovEstimate(estimate, overflow, per_path, failed, se)
            self.logger.info(f"Novikov estimate: {result.to_dict()}")
            return result
        except Exception as e:
            self.logger.error(f"Novikov estimate failed: {e}")
            raise

    def rn_log_weight(self, path: PathResult, coeffs: CoefficientSpec, q: CovarianceOperator,
                      direction: float = 1.0) -> float:
        """sum_k direction <phi(t_k), dW_k> - 1/2 sum_k ||phi(t_k)||^2 dt

        direction=+1 adds the drift to driftless paths, -1 removes it from drifted ones.
        """
        if path.increments is None:
            raise CapabilityError(f"Path {path.path_id} was simulated without recorded increments")
        n_steps = path.increments.shape[0]
        if len(path.snapshots) < n_steps + 1:
            raise CapabilityError(f"Path {path.path_id} needs a snapshot at every step (snapshot_stride=1)")

        weight = 0.0
        for k in range(n_steps):
            t, g = path.snapshots[k]
            phi = phi_curve(t, g, coeffs)
            increment = sample_increment(q, path.dt, z=path.increments[k])
            weight += direction * inner_product(phi, increment) - 0.5 * norm(phi) ** 2 * path.dt
        path.rn_log_weight = weight
        return weight

    def weight_all(self, ensemble: PathEnsemble, coeffs: CoefficientSpec, q: CovarianceOperator,
                   direction: float = 1.0) -> np.ndarray:
        return np.array([self.rn_log_weight(p, coeffs, q, direction) for p in ensemble.paths])

    def weight_normalization(self, ensemble: PathEnsemble, coeffs: CoefficientSpec,
                             q: CovarianceOperator, direction: float = 1.0) -> Dict[str, float]:
        """Ensemble mean of exp(log weight), which should be 1 within Monte Carlo error"""
        weights = np.exp(self.weight_all(ensemble, coeffs, q, direction))
        return {'mean': float(weights.mean()),
                'se': float(weights.std(ddof=1) / math.sqrt(weights.size))}

    def reweighted_mean(self, ensemble: PathEnsemble, coeffs: CoefficientSpec, q: CovarianceOperator,
                        x: float, direction: float = -1.0) -> Dict[str, float]:
        """Importance-sampling estimate of E[g_T(x)] under the changed measure"""
        survivors = ensemble.survivors
        weights = np.exp(np.array([self.rn_log_weight(p, coeffs, q, direction) for p in survivors]))
        values = np.array([delta_eval(p.final, x) for p in survivors])
        weighted = weights * values
        return {
            'mean': float(weighted.mean()),
            'se': float(weighted.std(ddof=1) / math.sqrt(weighted.size)),
            'unweighted_mean': float(values.mean()),
        }

    def ensemble_report(self, ensemble: PathEnsemble, g0: CurveGrid, coeffs: CoefficientSpec,
                        q: CovarianceOperator, T_bar: float, x: float,
                        direction: float = -1.0) -> Dict[str, Any]:
        """Novikov estimate, log weights on every weightable path and the reweighted mean at x"""
        try:
            spec = GirsanovSpec(coeffs, horizon=ensemble.sim.horizon)
            blocked = {}
            for path in ensemble.paths:
                times = spec.non_invertible_times(path)
                if times:
                    blocked[path.path_id] = times
            weightable = PathEnsemble(
                paths=[p for p in ensemble.paths if p.increments is not None and p.path_id not in blocked],
                sim=ensemble.sim,
                space=ensemble.space,
            )
            if blocked:
                self.logger.warning(f"Diffusion kernel not invertible on {len(blocked)} paths, "
                                    f"no weight for them")

            report: Dict[str, Any] = {
                'direction': direction,
                'T_bar': T_bar,
                'x': x,
                'novikov': self.novikov_estimate(g0, coeffs, q, ensemble.sim, T_bar).to_dict(),
                'non_invertible_times': blocked,
                'n_weighted': weightable.n_paths,
                'weight_normalization': None,
                'reweighted_mean': None,
            }
            if weightable.n_paths >= 2:
                log_weights = self.weight_all(weightable, coeffs, q, direction)
                report['log_weight_mean'] = float(log_weights.mean())
                report['weight_normalization'] = self.weight_normalization(weightable, coeffs, q, direction)
                if len(weightable.survivors) >= 2:
                    report['reweighted_mean'] = self.reweighted_mean(weightable, coeffs, q, x, direction)
            return report
        except Exception as e:
            self.logger.error(f"Girsanov report failed: {e}")
            raise
