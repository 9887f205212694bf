"""
Fixed-delivery projection F(t, T) = g_t(T - t) of the curve SPDE and its
one-dimensional SDE

    dF(t, T) = a(t, F) dt + c_t(T) psi(t, F) dW_t,

simulated by Euler-Maruyama, optionally on the same Gaussians the SPDE path
consumed, and compared with the projected SPDE paths.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from forward_curves.errors import CouplingError, StepError
from forward_curves.noise import CovarianceOperator, NoiseStream, c_coeff, correlation
from forward_curves.pointwise import CoefficientSpec
from forward_curves.solver import EnsembleSimulator, PathEnsemble, SimConfig, fit_strong_order
from forward_curves.space_core import CurveGrid, delta_eval

INDEPENDENT = 'independent'
COUPLED = 'coupled'

# stream purposes, so SDE-only draws never collide with SPDE draws of the same path
_SCALAR_STREAM = 1
_CORRELATION_STREAM = 2


@dataclass(frozen=True, eq=False)
class ProjectionSpec:
    T: float
    coeffs: CoefficientSpec
    q: CovarianceOperator
    F0: float
    absorb_at_zero: bool = True

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"Maturity T must be positive, got {self.T}")

    @classmethod
    def from_curve(cls, g0: CurveGrid, T: float, coeffs: CoefficientSpec, q: CovarianceOperator,
                   absorb_at_zero: bool = True) -> 'ProjectionSpec':
        return cls(T=T, coeffs=coeffs, q=q, F0=float(delta_eval(g0, T)), absorb_at_zero=absorb_at_zero)

    def absorbs(self, t: float) -> bool:
        """Zero is absorbing when enabled and psi(t, 0) = 0"""
        diffusion = self.coeffs.diffusion
        if not self.absorb_at_zero or not diffusion.domain.contains(0.0):
            return False
        return bool(np.all(diffusion(t, np.zeros(1)) == 0))


@dataclass
class FEnsemble:
    """F(t, T) trajectories, one row per path; NaN after a path is stopped"""
    T: float
    times: np.ndarray
    values: np.ndarray
    path_ids: List[int]
    noise_mode: str

    @property
    def terminal(self) -> np.ndarray:
        return self.values[:, -1]

    def terminal_stats(self) -> Dict[str, float]:
        alive = self.terminal[np.isfinite(self.terminal)]
        n = alive.size
        if n < 2:
            return {'n': n, 'mean': float('nan'), 'var': float('nan'), 'se_mean': float('nan'),
                    'se_var': float('nan')}
        var = float(alive.var(ddof=1))
        centred = (alive - alive.mean()) ** 2
        return {
            'n': n,
            'mean': float(alive.mean()),
            'var': var,
            'se_mean': math.sqrt(var / n),
            'se_var': float(centred.std(ddof=1) / math.sqrt(n)),
        }

    def mean_path(self) -> Tuple[np.ndarray, np.ndarray]:
        """Mean of F(t) over paths alive at t, with standard errors"""
        means, ses = [], []
        for column in self.values.T:
            alive = column[np.isfinite(column)]
            means.append(alive.mean() if alive.size else np.nan)
            ses.append(alive.std(ddof=1) / math.sqrt(alive.size) if alive.size > 1 else np.nan)
        return np.array(means), np.array(ses)

    def to_frame(self) -> pd.DataFrame:
        n_paths, n_times = self.values.shape
        return pd.DataFrame({
            'path_id': np.repeat(self.path_ids, n_times),
            't': np.tile(self.times, n_paths),
            'T': self.T,
            'F': self.values.ravel(),
        })


@dataclass
class ProjectionReport:
    T: float
    pathwise_sup: List[float]
    terminal: Dict[str, Any]
    passed: bool
    frame: pd.DataFrame = field(repr=False)

    def to_dict(self) -> Dict[str, Any]:
        sup = np.array(self.pathwise_sup)
        return {
            'T': self.T,
            'pathwise_sup_mean': float(sup.mean()) if sup.size else float('nan'),
            'pathwise_sup_max': float(sup.max()) if sup.size else float('nan'),
            'terminal': self.terminal,
            'passed': self.passed,
        }


class ProjectionHarness:
    """Euler-Maruyama for the fixed-delivery SDE and its comparison with the SPDE."""

    def __init__(self, simulator: Optional[EnsembleSimulator] = None):
        self.simulator = simulator or EnsembleSimulator()
        self.logger = logging.getLogger(__name__)

    # -- stepping ----------------------------------------------------------

    @staticmethod
    def _step(F: np.ndarray, t: float, spec: ProjectionSpec, dt: float, z: np.ndarray,
              vol: float) -> np.ndarray:
        """Vectorized Euler-Maruyama step; NaN marks paths that left the domain"""
        F = np.asarray(F, dtype=float)
        out = np.full_like(F, np.nan)
        absorbing = spec.absorbs(t)
        absorbed = absorbing & (F == 0)
        live = np.isfinite(F) & spec.coeffs.diffusion.domain.contains(F) & ~absorbed
        if np.any(live):
            f = F[live]
            drift = spec.coeffs.drift(t, f)
            diffusion = spec.coeffs.diffusion(t, f)
            out[live] = f + drift * dt + vol * diffusion * math.sqrt(dt) * z[live]
        out[absorbed] = 0.0
        if absorbing:
            out[live & (out <= 0)] = 0.0
        return out

    def sde_step(self, F: float, t: float, spec: ProjectionSpec, dt: float, z: float) -> float:
        if not spec.coeffs.diffusion.domain.contains(F) and not (F == 0 and spec.absorbs(t)):
            raise StepError(
                f"F={F} outside the {spec.coeffs.diffusion.domain.value} domain at t={t}",
                {'t': t, 'F': F},
            )
        vol = c_coeff(spec.q, t, spec.T)
        return float(self._step(np.array([F]), t, spec, dt, np.array([z]), vol)[0])

    # -- ensembles ---------------------------------------------------------

    def _coupled_normals(self, spec: ProjectionSpec, sim: SimConfig, path_ids: Sequence[int],
                         n_steps: int) -> Tuple[np.ndarray, np.ndarray]:
        loadings = np.array([spec.q.loadings(spec.T - sim.time(k)) for k in range(n_steps)])
        vols = np.linalg.norm(loadings, axis=1)
        if np.any(vols == 0):
            k = int(np.flatnonzero(vols == 0)[0])
            raise CouplingError(f"c_t(T) vanishes at t={sim.time(k)}, coupled noise is undefined")
        draws = np.empty((len(path_ids), n_steps))
        for row, path_id in enumerate(path_ids):
            normals = NoiseStream(sim.master_seed, path_id).normals(sim.n_steps, spec.q.n_factors,
                                                                    sim.refinement)[:n_steps]
            draws[row] = np.einsum('kj,kj->k', normals, loadings) / vols
        return draws, vols

    def simulate_F(self, spec: ProjectionSpec, sim: SimConfig, noise_mode: str = INDEPENDENT,
                   path_ids: Optional[Sequence[int]] = None) -> FEnsemble:
        try:
            path_ids = list(range(sim.n_paths)) if path_ids is None else list(path_ids)
            n_steps = min(sim.n_steps, int(math.floor(spec.T / sim.dt + 1e-9)))
            if noise_mode == COUPLED:
                if sim.horizon > spec.T + 1e-12:
                    raise CouplingError(
                        f"Coupled run needs horizon <= T, got horizon={sim.horizon}, T={spec.T}"
                    )
                draws, vols = self._coupled_normals(spec, sim, path_ids, n_steps)
            elif noise_mode == INDEPENDENT:
                draws = np.vstack([
                    NoiseStream(sim.master_seed, pid, _SCALAR_STREAM).normals(n_steps, 1, sim.refinement)[:, 0]
                    for pid in path_ids
                ]) if path_ids else np.empty((0, n_steps))
                vols = np.array([c_coeff(spec.q, sim.time(k), spec.T) for k in range(n_steps)])
            else:
                raise ValueError(f"Unknown noise mode '{noise_mode}'")

            values = np.empty((len(path_ids), n_steps + 1))
            values[:, 0] = spec.F0
            for k in range(n_steps):
                values[:, k + 1] = self._step(values[:, k], sim.time(k), spec, sim.dt, draws[:, k], vols[k])

            times = np.array([sim.time(k) for k in range(n_steps + 1)])
            stopped = int(np.sum(~np.isfinite(values[:, -1])))
            self.logger.info(f"Simulated {len(path_ids)} F paths for T={spec.T} ({noise_mode}), "
                             f"{stopped} left the domain")
            return FEnsemble(T=spec.T, times=times, values=values, path_ids=path_ids, noise_mode=noise_mode)
        except Exception as e:
            self.logger.error(f"simulate_F failed: {e}")
            raise

    # -- comparisons -------------------------------------------------------

    def _check_coupling(self, g_paths: PathEnsemble, spec: ProjectionSpec, sim: SimConfig):
        space = g_paths.space
        if space.node_index(spec.T) is None:
            raise CouplingError(f"Maturity T={spec.T} is not a grid node (dx={space.dx})")
        if not sim.on_grid(space):
            raise CouplingError(f"dt={sim.dt} is not a multiple of the grid spacing {space.dx}")
        if spec.q.space != space:
            raise CouplingError("Covariance operator and SPDE paths use different SpaceConfigs")
        mine, theirs = sim.describe(), g_paths.sim.describe()
        for key in ('dt', 'horizon', 'master_seed', 'refinement'):
            if mine[key] != theirs[key]:
                raise CouplingError(f"SPDE run and SDE run disagree on {key}: {theirs[key]} vs {mine[key]}")
        if sim.horizon > spec.T + 1e-12:
            raise CouplingError(f"Coupled run needs horizon <= T, got horizon={sim.horizon}, T={spec.T}")

    @staticmethod
    def _projected(path, T: float) -> Tuple[np.ndarray, np.ndarray]:
        times = np.array([t for t, _ in path.snapshots])
        values = np.array([delta_eval(curve, T - t) for t, curve in path.snapshots])
        return times, values

    def compare_projection(self, g_paths: PathEnsemble, spec: ProjectionSpec, sim: SimConfig) -> ProjectionReport:
        """Pathwise and distributional comparison of g_t(T - t) with the coupled SDE"""
        try:
            self._check_coupling(g_paths, spec, sim)
            ids = [p.path_id for p in g_paths.paths]
            sde = self.simulate_F(spec, sim, COUPLED, path_ids=ids)

            rows, sups, spde_terminal, sde_terminal = [], [], [], []
            for row, path in enumerate(g_paths.paths):
                times, projected = self._projected(path, spec.T)
                steps = np.rint(times / sim.dt).astype(int)
                f_sde = sde.values[row, steps]
                diff = np.abs(projected - f_sde)
                finite = np.isfinite(diff)
                sups.append(float(diff[finite].max()) if finite.any() else float('nan'))
                rows.append(pd.DataFrame({
                    'path_id': path.path_id, 't': times, 'T': spec.T,
                    'F_sde': f_sde, 'F_spde_projected': projected, 'abs_diff': diff,
                }))
                if path.survived and np.isfinite(sde.values[row, -1]):
                    spde_terminal.append(projected[-1])
                    sde_terminal.append(sde.values[row, -1])

            terminal = _compare_samples(np.array(sde_terminal), np.array(spde_terminal))
            report = ProjectionReport(
                T=spec.T,
                pathwise_sup=sups,
                terminal=terminal,
                passed=bool(terminal['mean_agrees'] and terminal['var_agrees']),
                frame=pd.concat(rows, ignore_index=True),
            )
            self.logger.info(f"Projection comparison: {report.to_dict()}")
            return report
        except Exception as e:
            self.logger.error(f"Projection comparison failed: {e}")
            raise

    def convergence_table(self, g0: CurveGrid, spec: ProjectionSpec, sim: SimConfig,
                          levels: int = 5) -> Tuple[pd.DataFrame, float]:
        """Pathwise error of the projected SPDE at dt, dt/2, ... against the SDE on the finest dt.

        All levels are driven by one Brownian path per path id.
        """
        finest = levels - 1
        fine_sim = replace(sim, dt=sim.dt / 2 ** finest, refinement=sim.refinement,
                           snapshot_stride=1)
        if not fine_sim.on_grid(g0.space):
            raise CouplingError(f"Finest dt={fine_sim.dt} is not a multiple of the grid spacing {g0.space.dx}")
        if g0.space.node_index(spec.T) is None:
            raise CouplingError(f"Maturity T={spec.T} is not a grid node (dx={g0.space.dx})")
        reference = self.simulate_F(spec, fine_sim, COUPLED)

        rows = []
        for k in range(levels):
            sim_k = replace(sim, dt=sim.dt / 2 ** k, refinement=sim.refinement + finest - k,
                            snapshot_stride=1)
            ensemble = self.simulator.simulate_ensemble(g0, spec.coeffs, spec.q, sim_k)
            stride = 2 ** (finest - k)
            errors = []
            for row, path in enumerate(ensemble.paths):
                times, projected = self._projected(path, spec.T)
                ref = reference.values[row, np.rint(times / fine_sim.dt).astype(int)]
                diff = np.abs(projected - ref)
                if np.all(np.isfinite(diff)) and path.survived:
                    errors.append(float(diff.max()))
            errors = np.array(errors)
            rows.append({
                'dt': sim_k.dt,
                'reference_dt': fine_sim.dt,
                'n_paths': int(errors.size),
                'mean_sup_error': float(errors.mean()) if errors.size else float('nan'),
                'max_sup_error': float(errors.max()) if errors.size else float('nan'),
                'se_sup_error': float(errors.std(ddof=1) / math.sqrt(errors.size)) if errors.size > 1 else 0.0,
                'steps_per_reference_step': stride,
            })
        # the finest level coincides with the reference, so it is left out of the fit
        frame = pd.DataFrame(rows)
        order = fit_strong_order(frame['dt'][:-1], frame['mean_sup_error'][:-1])
        self.logger.info(f"Projection convergence: fitted strong order {order:.3f}")
        return frame, order

    def coupled_increment_correlation(self, q: CovarianceOperator, t: float, T1: float, T2: float,
                                      n_samples: int, master_seed: int) -> Dict[str, float]:
        """Empirical correlation of the maturity-specific Brownian increments at T1 and T2"""
        normals = NoiseStream(master_seed, 0, _CORRELATION_STREAM).normals(n_samples, q.n_factors)
        first = normals @ q.loadings(T1 - t) / c_coeff(q, t, T1)
        second = normals @ q.loadings(T2 - t) / c_coeff(q, t, T2)
        rho_hat = float(np.corrcoef(first, second)[0, 1])
        rho = correlation(q, t, T1, T2)
        return {
            'rho_hat': rho_hat,
            'rho': rho,
            'se': (1 - rho_hat ** 2) / math.sqrt(n_samples),
        }


def _variance_se(sample: np.ndarray) -> float:
    centred = (sample - sample.mean()) ** 2
    return float(centred.std(ddof=1) / math.sqrt(sample.size))


def _compare_samples(sde: np.ndarray, spde: np.ndarray) -> Dict[str, Any]:
    """Terminal mean and variance of both samples, each compared within 3 combined SE"""
    n = int(min(sde.size, spde.size))
    if n < 2:
        return {'n': n, 'mean_agrees': False, 'var_agrees': False}
    se_sde = sde.std(ddof=1) / math.sqrt(n)
    se_spde = spde.std(ddof=1) / math.sqrt(n)
    combined = math.sqrt(se_sde ** 2 + se_spde ** 2)
    gap = float(sde.mean() - spde.mean())
    se_var_sde, se_var_spde = _variance_se(sde), _variance_se(spde)
    var_gap = float(sde.var(ddof=1) - spde.var(ddof=1))
    return {
        'n': n,
        'mean_sde': float(sde.mean()),
        'mean_spde': float(spde.mean()),
        'var_sde': float(sde.var(ddof=1)),
        'var_spde': float(spde.var(ddof=1)),
        'se_mean_sde': float(se_sde),
        'se_mean_spde': float(se_spde),
        'se_var_sde': se_var_sde,
        'se_var_spde': se_var_spde,
        'mean_gap': gap,
        'var_gap': var_gap,
        'mean_agrees': bool(abs(gap) <= 3 * combined or abs(gap) <= 1e-12),
        'var_agrees': bool(abs(var_gap) <= 3 * math.hypot(se_var_sde, se_var_spde) or abs(var_gap) <= 1e-12),
    }
