"""
Mild-solution stepping for the forward-curve SPDE

    dg_t = (d/dx g_t + alpha(t, g_t)) dt + M_{Psi(t, g_t)} dW_t

with the exponential-Euler scheme g+ = S_dt(g + dt alpha + Psi * dW): drift and
noise increments are added first, then the whole increment is transported by
the shift semigroup. A path is stopped, never clipped, when it leaves the
coefficient domain or its norm crosses the blow-up threshold.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from config.config import config
from forward_curves.errors import BlowUpError, CurveDomainError, StepError
from forward_curves.noise import CovarianceOperator, NoiseStream, sample_increment, variance_kernel
from forward_curves.operators import exp_map, log_map
from forward_curves.pointwise import CoefficientSpec
from forward_curves.space_core import CurveGrid, SpaceConfig, norm, shift

StepObserver = Callable[[int, float, CurveGrid, np.ndarray], None]


class CurveCoefficients(Protocol):
    def drift_curve(self, t: float, g: CurveGrid) -> CurveGrid: ...

    def diffusion_curve(self, t: float, g: CurveGrid) -> CurveGrid: ...


@dataclass(frozen=True)
class SimConfig:
    dt: float
    horizon: float
    n_paths: int = 1
    master_seed: int = field(default_factory=lambda: config.simulation.master_seed)
    blowup_norm: float = field(default_factory=lambda: config.simulation.blowup_norm)
    snapshot_stride: int = field(default_factory=lambda: config.simulation.snapshot_stride)
    positivity_monitor: bool = field(default_factory=lambda: config.simulation.positivity_monitor)
    record_increments: bool = False
    refinement: int = 0  # Brownian path drawn 2**refinement times finer, then aggregated

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.n_paths < 1:
            raise ValueError(f"n_paths must be >= 1, got {self.n_paths}")
        if self.snapshot_stride < 1:
            raise ValueError(f"snapshot_stride must be >= 1, got {self.snapshot_stride}")
        if self.refinement < 0:
            raise ValueError(f"refinement must be >= 0, got {self.refinement}")
        steps = round(self.horizon / self.dt)
        if steps < 1 or abs(steps * self.dt - self.horizon) > 1e-12 * max(1.0, self.horizon):
            raise ValueError(f"dt={self.dt} does not divide horizon={self.horizon}")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def time(self, k: int) -> float:
        return k * self.dt

    def on_grid(self, space: SpaceConfig) -> bool:
        """True when the shift of one step is an exact index shift"""
        return space.node_multiple(self.dt) is not None

    def describe(self) -> Dict[str, Any]:
        return {
            'dt': self.dt,
            'horizon': self.horizon,
            'n_paths': self.n_paths,
            'master_seed': self.master_seed,
            'blowup_norm': self.blowup_norm,
            'snapshot_stride': self.snapshot_stride,
            'positivity_monitor': self.positivity_monitor,
            'record_increments': self.record_increments,
            'refinement': self.refinement,
        }


@dataclass
class PathResult:
    path_id: int
    dt: float
    snapshots: List[Tuple[float, CurveGrid]] = field(default_factory=list)
    stopped_at: Optional[float] = None
    stop_reason: Optional[str] = None
    positivity_violations: List[Tuple[float, int, float]] = field(default_factory=list)
    rn_log_weight: Optional[float] = None
    increments: Optional[np.ndarray] = None  # normals consumed per completed step

    @property
    def survived(self) -> bool:
        return self.stopped_at is None

    @property
    def final(self) -> CurveGrid:
        return self.snapshots[-1][1]

    @property
    def times(self) -> np.ndarray:
        return np.array([t for t, _ in self.snapshots])


def step_mild(g: CurveGrid, t: float, coeffs: CurveCoefficients, q: CovarianceOperator, dt: float,
              rng: Optional[np.random.Generator] = None, z: Optional[np.ndarray] = None) -> CurveGrid:
    """One exponential-Euler step from t to t + dt"""
    try:
        drift = coeffs.drift_curve(t, g)
        kernel = coeffs.diffusion_curve(t, g)
    except CurveDomainError as e:
        diagnostics = {'t': t, 'node': e.node, 'value': e.value}
        if e.value is not None and not math.isfinite(e.value):
            raise BlowUpError(f"Non-finite coefficient at t={t}: {e}", diagnostics) from e
        raise StepError(f"Coefficient domain violation at t={t}: {e}", diagnostics) from e

    increment = sample_increment(q, dt, rng=rng, z=z)
    with np.errstate(over='ignore', invalid='ignore'):
        values = g.values + dt * drift.values + kernel.values * increment.values
        tail = g.tail + dt * drift.tail + kernel.tail * increment.tail
    if not (np.all(np.isfinite(values)) and math.isfinite(tail)):
        bad = np.flatnonzero(~np.isfinite(values))
        node = int(bad[0]) if bad.size else 'tail'
        raise BlowUpError(f"Non-finite curve after step at t={t}", {'t': t, 'node': node})
    return shift(CurveGrid(values, g.space, tail), dt)


def fit_strong_order(dts: Sequence[float], errors: Sequence[float]) -> float:
    """Slope of log(error) against log(dt)"""
    dts, errors = np.asarray(dts, dtype=float), np.asarray(errors, dtype=float)
    keep = (errors > 0) & np.isfinite(errors)
    if keep.sum() < 2:
        return float('nan')
    return float(stats.linregress(np.log(dts[keep]), np.log(errors[keep])).slope)


@dataclass
class PathEnsemble:
    paths: List[PathResult]
    sim: SimConfig
    space: SpaceConfig

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    @property
    def survivors(self) -> List[PathResult]:
        return [p for p in self.paths if p.survived]

    @property
    def n_blown_up(self) -> int:
        return sum(1 for p in self.paths if p.stop_reason == 'blowup')

    @property
    def n_stopped(self) -> int:
        return sum(1 for p in self.paths if not p.survived)

    @property
    def n_with_violations(self) -> int:
        return sum(1 for p in self.paths if p.positivity_violations)

    @property
    def violation_fraction(self) -> float:
        return self.n_with_violations / self.n_paths

    def final_values(self) -> np.ndarray:
        """(n_survivors, n_nodes) node values at the horizon"""
        survivors = self.survivors
        if not survivors:
            return np.empty((0, self.space.n_nodes))
        return np.vstack([p.final.values for p in survivors])

    def mean_final(self) -> Tuple[np.ndarray, np.ndarray]:
        """Node-wise mean over surviving paths and its standard error"""
        values = self.final_values()
        if values.shape[0] < 2:
            raise ValueError("Need at least two surviving paths for a standard error")
        return values.mean(axis=0), values.std(axis=0, ddof=1) / math.sqrt(values.shape[0])

    def curves_frame(self, include_rn_weight: bool = False) -> pd.DataFrame:
        nodes = self.space.nodes
        frames = []
        for p in self.paths:
            for t, curve in p.snapshots:
                frame = pd.DataFrame({
                    'path_id': p.path_id,
                    't': t,
                    'x': nodes,
                    'value': curve.values,
                })
                if include_rn_weight:
                    frame['rn_log_weight'] = p.rn_log_weight
                frames.append(frame)
        if not frames:
            return pd.DataFrame(columns=['path_id', 't', 'x', 'value'])
        return pd.concat(frames, ignore_index=True)

    def summary(self) -> Dict[str, Any]:
        summary = {
            'n_paths': self.n_paths,
            'n_survived': len(self.survivors),
            'n_blown_up': self.n_blown_up,
            'n_stopped': self.n_stopped,
            'stop_reasons': _count([p.stop_reason for p in self.paths if p.stop_reason]),
            'n_paths_with_positivity_violations': self.n_with_violations,
            'positivity_violation_count': sum(len(p.positivity_violations) for p in self.paths),
            'positivity_violation_fraction': self.violation_fraction,
            'shift_on_grid': self.sim.on_grid(self.space),
        }
        values = self.final_values()
        if values.shape[0] > 0:
            norms = [norm(p.final) for p in self.survivors]
            summary.update({
                'final_value_at_0_mean': float(values[:, 0].mean()),
                'final_norm_mean': float(np.mean(norms)),
                'final_norm_max': float(np.max(norms)),
            })
        return summary


def _count(items: List[str]) -> Dict[str, int]:
    counts: Dict[str, int] = {}
    for item in items:
        counts[item] = counts.get(item, 0) + 1
    return counts


class ExpTransformedCoefficients:
    """Coefficients of z = Exp(g): drift z (alpha + Sigma/2), diffusion z Psi, both at Log z.

    Sigma(t, f)(x) = psi(t, f(x))^2 sum_j l_j e_j(x)^2.
    """

    def __init__(self, base: CoefficientSpec, q: CovarianceOperator, include_correction: bool = True):
        self.base = base
        self.include_correction = include_correction
        self._variance = variance_kernel(q)

    def drift_curve(self, t: float, z: CurveGrid) -> CurveGrid:
        g = log_map(z)
        alpha = self.base.drift_curve(t, g)
        values, tail = alpha.values, alpha.tail
        if self.include_correction:
            psi = self.base.diffusion_curve(t, g)
            values = values + 0.5 * psi.values ** 2 * self._variance.values
            tail = tail + 0.5 * psi.tail ** 2 * self._variance.tail
        return CurveGrid(z.values * values, z.space, z.tail * tail)

    def diffusion_curve(self, t: float, z: CurveGrid) -> CurveGrid:
        psi = self.base.diffusion_curve(t, log_map(z))
        return CurveGrid(z.values * psi.values, z.space, z.tail * psi.tail)


@dataclass
class ExpModelReport:
    dt: float
    include_correction: bool
    n_paths: int
    n_compared: int
    n_breakdowns: int
    n_base_stopped: int
    mean_discrepancy: float
    max_discrepancy: float
    se_discrepancy: float
    per_path: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'dt': self.dt,
            'include_correction': self.include_correction,
            'n_paths': self.n_paths,
            'n_compared': self.n_compared,
            'n_breakdowns': self.n_breakdowns,
            'n_base_stopped': self.n_base_stopped,
            'mean_discrepancy': self.mean_discrepancy,
            'max_discrepancy': self.max_discrepancy,
            'se_discrepancy': self.se_discrepancy,
        }


class EnsembleSimulator:
    """Runs SPDE paths, path ensembles and the exponential-model comparison."""

    def __init__(self, max_workers: Optional[int] = None):
        self.max_workers = max_workers or config.performance.worker_threads
        self.logger = logging.getLogger(__name__)

    def simulate_path(self, g0: CurveGrid, coeffs: CurveCoefficients, q: CovarianceOperator,
                      sim: SimConfig, path_id: int = 0, on_step: Optional[StepObserver] = None) -> PathResult:
        if g0.space != q.space:
            raise ValueError("Initial curve and covariance operator use different SpaceConfigs")

        normals = NoiseStream(sim.master_seed, path_id).normals(sim.n_steps, q.n_factors, sim.refinement)
        result = PathResult(path_id=path_id, dt=sim.dt, snapshots=[(0.0, g0)])
        g = g0
        completed = 0

        for k in range(sim.n_steps):
            t = sim.time(k)
            if on_step is not None:
                on_step(k, t, g, normals[k])
            try:
                g_next = step_mild(g, t, coeffs, q, sim.dt, z=normals[k])
            except BlowUpError as e:
                result.stopped_at, result.stop_reason = sim.time(k + 1), 'blowup'
                self.logger.warning(f"Path {path_id} blew up at t={result.stopped_at}: {e}")
                break
            except StepError as e:
                result.stopped_at, result.stop_reason = t, 'domain'
                self.logger.warning(f"Path {path_id} stopped at t={t}: {e}")
                break

            t_next = sim.time(k + 1)
            if norm(g_next) > sim.blowup_norm:
                result.stopped_at, result.stop_reason = t_next, 'blowup'
                self.logger.warning(f"Path {path_id} crossed blow-up norm {sim.blowup_norm} at t={t_next}")
                break

            completed = k + 1
            g = g_next
            if sim.positivity_monitor:
                self._record_violations(result, t_next, g)
            if completed % sim.snapshot_stride == 0 or completed == sim.n_steps:
                result.snapshots.append((t_next, g))

        if sim.record_increments:
            result.increments = normals[:completed].copy()
        return result

    @staticmethod
    def _record_violations(result: PathResult, t: float, g: CurveGrid):
        bad = np.flatnonzero(g.values <= 0)
        for idx in bad:
            result.positivity_violations.append((t, int(idx), float(g.values[idx])))
        if g.tail <= 0:
            result.positivity_violations.append((t, -1, g.tail))

    def simulate_ensemble(self, g0: CurveGrid, coeffs: CurveCoefficients, q: CovarianceOperator,
                          sim: SimConfig,
                          observer_factory: Optional[Callable[[int], StepObserver]] = None) -> PathEnsemble:
        """n_paths independent paths, each on its own (master_seed, path_id) stream"""
        try:
            self.logger.info(f"Simulating {sim.n_paths} paths: dt={sim.dt}, horizon={sim.horizon}, "
                             f"workers={self.max_workers}")

            def run(path_id: int) -> PathResult:
                observer = observer_factory(path_id) if observer_factory else None
                try:
                    return self.simulate_path(g0, coeffs, q, sim, path_id, on_step=observer)
                except Exception as e:
                    self.logger.warning(f"Path {path_id} failed: {e}")
                    return PathResult(path_id=path_id, dt=sim.dt, snapshots=[(0.0, g0)],
                                      stopped_at=0.0, stop_reason=f'error: {e}')

            if self.max_workers == 1 or sim.n_paths == 1:
                paths = [run(i) for i in range(sim.n_paths)]
            else:
                with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
                    paths = list(executor.map(run, range(sim.n_paths)))

            ensemble = PathEnsemble(paths=paths, sim=sim, space=g0.space)
            self.logger.info(f"Ensemble done: {len(ensemble.survivors)} survived, "
                             f"{ensemble.n_blown_up} blew up, "
                             f"{ensemble.n_with_violations} paths with positivity violations")
            return ensemble
        except Exception as e:
            self.logger.error(f"Ensemble simulation failed: {e}")
            raise

    def exp_model_check(self, g0: CurveGrid, coeffs: CoefficientSpec, q: CovarianceOperator,
                        sim: SimConfig, include_correction: bool = True) -> ExpModelReport:
        """Compare Exp(g_t) with z_t simulated directly from the transformed SPDE on the same noise"""
        try:
            base = self.simulate_ensemble(g0, coeffs, q, sim)
            transformed = ExpTransformedCoefficients(coeffs, q, include_correction)
            direct = self.simulate_ensemble(exp_map(g0), transformed, q, sim)

            per_path = []
            n_breakdowns = sum(1 for p in direct.paths if not p.survived)
            for g_path, z_path in zip(base.paths, direct.paths):
                if g_path.survived and z_path.survived:
                    exp_g = exp_map(g_path.final)
                    per_path.append(float(np.max(np.abs(exp_g.values - z_path.final.values))))
            if n_breakdowns:
                self.logger.warning(f"Transform breakdown on {n_breakdowns} paths (z left H_>)")

            values = np.array(per_path)
            report = ExpModelReport(
                dt=sim.dt,
                include_correction=include_correction,
                n_paths=sim.n_paths,
                n_compared=len(per_path),
                n_breakdowns=n_breakdowns,
                n_base_stopped=base.n_stopped,
                mean_discrepancy=float(values.mean()) if values.size else float('nan'),
                max_discrepancy=float(values.max()) if values.size else float('nan'),
                se_discrepancy=float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0,
                per_path=per_path,
            )
            self.logger.info(f"Exp-model check: {report.to_dict()}")
            return report
        except Exception as e:
            self.logger.error(f"Exp-model check failed: {e}")
            raise

    def exp_model_sweep(self, g0: CurveGrid, coeffs: CoefficientSpec, q: CovarianceOperator,
                        sim: SimConfig, levels: int = 4,
                        include_correction: bool = True) -> Tuple[pd.DataFrame, float]:
        """exp_model_check at dt, dt/2, ..., all levels driven by one Brownian path"""
        finest = levels - 1
        rows = []
        for k in range(levels):
            sim_k = replace(sim, dt=sim.dt / 2 ** k, refinement=sim.refinement + finest - k)
            report = self.exp_model_check(g0, coeffs, q, sim_k, include_correction)
            rows.append(report.to_dict())
        frame = pd.DataFrame(rows)
        order = fit_strong_order(frame['dt'], frame['mean_discrepancy'])
        return frame, order
