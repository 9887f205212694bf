"""
Truncated Q-Wiener noise on the curve space.

W = sum_j sqrt(l_j) beta_j e_j with {e_j} orthonormal in the curve space. The
eigenfunctions are built from analytic shapes and orthonormalized with
modified Gram-Schmidt under the space inner product.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config.config import config
from forward_curves.errors import (
    CurveDomainError,
    DegenerateCorrelationError,
    ModelSpecError,
    StructuralError,
)
from forward_curves.operators import MultiplicativeKernel, mult_apply
from forward_curves.space_core import CurveGrid, SpaceConfig, delta_eval, inner_product, norm

logger = logging.getLogger(__name__)

_UINT64 = (1 << 64) - 1


def _const_shape(space: SpaceConfig) -> CurveGrid:
    return CurveGrid.constant(space, 1.0)


def _expsat_shape(space: SpaceConfig, rate: float = 1.0) -> CurveGrid:
    return CurveGrid(1.0 - np.exp(-rate * space.nodes), space, 1.0)


def _damped_shape(space: SpaceConfig, decay: float = 1.0, frequency: float = math.pi) -> CurveGrid:
    return CurveGrid(np.exp(-decay * space.nodes) * np.sin(frequency * space.nodes), space, 0.0)


EIGEN_SHAPES = {
    'const': _const_shape,
    'expsat': _expsat_shape,
    'damped': _damped_shape,
}


@dataclass(frozen=True)
class EigenSpec:
    """One declared eigenpair: eigenvalue plus an analytic shape"""
    lam: float
    shape: str
    params: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, entry: Dict[str, Any]) -> 'EigenSpec':
        return cls(lam=float(entry['lambda']), shape=entry['shape'], params=dict(entry.get('params', {})))

    def to_dict(self) -> Dict[str, Any]:
        return {'lambda': self.lam, 'shape': self.shape, 'params': dict(self.params)}


def modified_gram_schmidt(curves: Sequence[CurveGrid]) -> List[CurveGrid]:
    basis: List[CurveGrid] = []
    for j, curve in enumerate(curves):
        v = curve
        for q in basis:
            v = v - q * inner_product(v, q)
        length = norm(v)
        if length < 1e-12:
            raise ModelSpecError(f"Eigenfunction {j} is linearly dependent on the previous ones")
        basis.append(v * (1.0 / length))
    return basis


@dataclass(frozen=True, eq=False)
class CovarianceOperator:
    """Truncated eigen-system {(l_j, e_j)} of the covariance operator Q."""

    space: SpaceConfig
    eigenvalues: Tuple[float, ...]
    eigenfunctions: Tuple[CurveGrid, ...]
    shapes: Tuple[EigenSpec, ...] = ()
    gram_residual: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, 'eigenvalues', tuple(float(v) for v in self.eigenvalues))
        object.__setattr__(self, 'eigenfunctions', tuple(self.eigenfunctions))
        if len(self.eigenvalues) != len(self.eigenfunctions) or not self.eigenvalues:
            raise ModelSpecError("Need a non-empty list of matching eigenvalues and eigenfunctions")
        for lam in self.eigenvalues:
            if not lam > 0:
                raise ModelSpecError(f"Eigenvalues must be positive, got {lam}")
        for e in self.eigenfunctions:
            if e.space != self.space:
                raise StructuralError("Eigenfunction built on a different SpaceConfig")

        gram = np.array([[inner_product(a, b) for b in self.eigenfunctions] for a in self.eigenfunctions])
        residual = float(np.max(np.abs(gram - np.eye(len(self.eigenfunctions)))))
        object.__setattr__(self, 'gram_residual', residual)
        if residual > config.noise.gram_tolerance:
            raise ModelSpecError(
                f"Eigenfunctions are not orthonormal: Gram residual {residual:.3e} exceeds "
                f"{config.noise.gram_tolerance}"
            )

    @classmethod
    def from_shapes(cls, space: SpaceConfig, specs: Sequence[Union[EigenSpec, Dict[str, Any]]],
                    orthonormalize: bool = True) -> 'CovarianceOperator':
        """Build eigenfunctions from named shapes, orthonormalized by modified Gram-Schmidt"""
        try:
            specs = [s if isinstance(s, EigenSpec) else EigenSpec.from_dict(s) for s in specs]
            truncation = config.noise.truncation
            if len(specs) > truncation:
                logger.warning(f"Truncating {len(specs)} eigenpairs to the first {truncation}")
                specs = specs[:truncation]

            curves = []
            for spec in specs:
                if spec.shape not in EIGEN_SHAPES:
                    raise ModelSpecError(
                        f"Unknown eigenfunction shape '{spec.shape}'. Available: {sorted(EIGEN_SHAPES)}"
                    )
                curves.append(EIGEN_SHAPES[spec.shape](space, **spec.params))
            if orthonormalize:
                curves = modified_gram_schmidt(curves)

            q = cls(space, tuple(s.lam for s in specs), tuple(curves), tuple(specs))
            logger.info(f"Built covariance operator: J={q.n_factors}, trace={q.trace:.6g}, "
                        f"Gram residual={q.gram_residual:.2e}")
            return q
        except TypeError as e:
            raise ModelSpecError(f"Bad eigenfunction parameters: {e}") from e

    @property
    def n_factors(self) -> int:
        return len(self.eigenvalues)

    @property
    def trace(self) -> float:
        return float(sum(self.eigenvalues))

    @cached_property
    def _basis(self) -> np.ndarray:
        return np.vstack([e.values for e in self.eigenfunctions])

    @cached_property
    def _basis_tail(self) -> np.ndarray:
        return np.array([e.tail for e in self.eigenfunctions])

    @cached_property
    def _scales(self) -> np.ndarray:
        return np.sqrt(np.array(self.eigenvalues))

    def loadings(self, x: float) -> np.ndarray:
        """sqrt(l_j) e_j(x) for each factor"""
        return self._scales * np.array([delta_eval(e, x) for e in self.eigenfunctions])

    def describe(self) -> Dict[str, Any]:
        return {
            'n_factors': self.n_factors,
            'trace': self.trace,
            'gram_residual': self.gram_residual,
            'eigenpairs': [s.to_dict() for s in self.shapes],
        }


@dataclass(frozen=True)
class NoiseStream:
    """Counter-based Philox stream keyed by (master_seed, path_id, purpose).

    The normal used at step k for factor j is entry (k, j) of the stream, so the
    draws of a path do not depend on which worker runs it.
    """

    master_seed: int
    path_id: int
    purpose: int = 0

    def generator(self) -> np.random.Generator:
        seed_seq = np.random.SeedSequence(
            entropy=int(self.master_seed) & _UINT64,
            spawn_key=(int(self.path_id), int(self.purpose)),
        )
        return np.random.Generator(np.random.Philox(seed_seq))

    def normals(self, n_steps: int, n_factors: int, refinement: int = 0) -> np.ndarray:
        """(n_steps, n_factors) standard normals; refinement m sums 2**m finer draws"""
        fine = self.generator().standard_normal((n_steps * 2 ** refinement, n_factors))
        if refinement == 0:
            return fine
        block = 2 ** refinement
        return fine.reshape(n_steps, block, n_factors).sum(axis=1) / math.sqrt(block)


def sample_increment(q: CovarianceOperator, dt: float, rng: Optional[np.random.Generator] = None,
                     z: Optional[np.ndarray] = None) -> CurveGrid:
    """Delta W = sum_j sqrt(l_j dt) Z_j e_j; Z from rng unless forced through z"""
    if not dt > 0:
        raise CurveDomainError(f"dt must be positive, got {dt}", value=dt)
    if z is None:
        if rng is None:
            raise ValueError("sample_increment needs either rng or z")
        z = rng.standard_normal(q.n_factors)
    coefficients = q._scales * math.sqrt(dt) * np.asarray(z, dtype=float)
    return CurveGrid(coefficients @ q._basis, q.space, float(coefficients @ q._basis_tail))


def variance_kernel(q: CovarianceOperator) -> CurveGrid:
    weights = np.array(q.eigenvalues)
    return CurveGrid(weights @ q._basis ** 2, q.space, float(weights @ q._basis_tail ** 2))


def c_coeff(q: CovarianceOperator, t: float, T: float) -> float:
    """c_t(T) = (sum_j l_j e_j(T - t)^2)^(1/2)"""
    if T < t:
        raise CurveDomainError(f"c_coeff needs T >= t, got t={t}, T={T}", value=T - t)
    return float(np.linalg.norm(q.loadings(T - t)))


def correlation(q: CovarianceOperator, t: float, T1: float, T2: float) -> float:
    if T1 < t or T2 < t:
        raise CurveDomainError(f"correlation needs T1, T2 >= t, got t={t}, T1={T1}, T2={T2}")
    if T1 == T2:
        if c_coeff(q, t, T1) == 0:
            raise DegenerateCorrelationError(f"c_t(T) vanishes at T={T1}")
        return 1.0
    a, b = q.loadings(T1 - t), q.loadings(T2 - t)
    ca, cb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if ca == 0 or cb == 0:
        raise DegenerateCorrelationError(
            f"c_t(T) vanishes: c(T1={T1})={ca}, c(T2={T2})={cb}"
        )
    return float(np.clip(a @ b / (ca * cb), -1.0, 1.0))


def correlation_matrix(q: CovarianceOperator, t: float, maturities: Sequence[float]) -> np.ndarray:
    n = len(maturities)
    matrix = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            matrix[i, j] = matrix[j, i] = correlation(q, t, maturities[i], maturities[j])
    return matrix


def hilbert_schmidt_norm(q: CovarianceOperator, kernel: MultiplicativeKernel) -> float:
    """||M_h||_HS = (sum_j l_j ||h e_j||^2)^(1/2) for the multiplicative operator with kernel h"""
    total = sum(lam * norm(mult_apply(kernel, e)) ** 2 for lam, e in zip(q.eigenvalues, q.eigenfunctions))
    return math.sqrt(total)


def hilbert_schmidt_bound(q: CovarianceOperator, kernel: MultiplicativeKernel) -> float:
    """K_M ||h|| tr(Q)^(1/2), an upper bound on hilbert_schmidt_norm"""
    return kernel.operator_norm_bound() * math.sqrt(q.trace)


def diffusion_operator_report(q: CovarianceOperator, kernel: MultiplicativeKernel) -> Dict[str, Any]:
    return {
        'kernel_norm': norm(kernel.kernel),
        'cone': kernel.cone.value,
        'operator_norm_bound': kernel.operator_norm_bound(),
        'hs_norm': hilbert_schmidt_norm(q, kernel),
        'hs_bound': hilbert_schmidt_bound(q, kernel),
    }
