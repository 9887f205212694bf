"""
Point-wise coefficient kernels psi(t, y), their lift to curves and numeric
estimators for the well-posedness and positivity conditions on psi.

Kernels are vectorized callables of (t, y) that broadcast like numpy ufuncs.
The estimators evaluate them on (t, y) lattices; they report evidence about a
model and never prove anything about it.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Union

import numpy as np

from config.config import LatticeConfig, config
from forward_curves.errors import (
    CapabilityError,
    CevParameterError,
    CurveDomainError,
    ModelSpecError,
)
from forward_curves.space_core import CurveGrid, SpaceConfig

ArrayLike = Union[float, np.ndarray]
Kernel = Callable[[ArrayLike, ArrayLike], np.ndarray]

# y used in place of 0 when taking the one-sided limit on a (0, inf) domain
_ZERO_PROBES = (1e-12, 1e-13)


class Domain(str, Enum):
    ALL_REALS = 'all_reals'
    NONNEG = 'nonneg'
    POS = 'pos'

    def contains(self, y: ArrayLike) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if self is Domain.NONNEG:
            return y >= 0
        if self is Domain.POS:
            # 0 is admitted through the one-sided limit convention
            return y >= 0
        return np.isfinite(y)

    def includes(self, other: 'Domain') -> bool:
        order = {Domain.POS: 0, Domain.NONNEG: 1, Domain.ALL_REALS: 2}
        return order[other] <= order[self]


class Family(str, Enum):
    CUSTOM = 'custom'
    CEV = 'cev'
    CEV_TILDE = 'cev_tilde'
    SEPARABLE = 'separable'
    EXP_FORM = 'exp_form'


# ---------------------------------------------------------------------------
# time factors beta(t)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstantBeta:
    level: float

    def __post_init__(self):
        if not self.level > 0:
            raise ModelSpecError(f"beta level must be positive, got {self.level}")

    def __call__(self, t: ArrayLike) -> np.ndarray:
        return np.full_like(np.asarray(t, dtype=float), self.level)

    def derivative(self, t: ArrayLike) -> np.ndarray:
        return np.zeros_like(np.asarray(t, dtype=float))

    @property
    def upper_bound(self) -> float:
        return self.level

    @property
    def lower_bound(self) -> float:
        return self.level


@dataclass(frozen=True)
class SeasonalBeta:
    """beta(t) = level + amplitude * cos(2 pi (t - phase) / period)"""

    level: float
    amplitude: float
    period: float = 1.0
    phase: float = 0.0

    def __post_init__(self):
        if not (0 <= self.amplitude < self.level):
            raise ModelSpecError(
                f"Seasonal beta needs 0 <= amplitude < level, got amplitude={self.amplitude}, "
                f"level={self.level}"
            )
        if not self.period > 0:
            raise ModelSpecError(f"Seasonal period must be positive, got {self.period}")

    def __call__(self, t: ArrayLike) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self.level + self.amplitude * np.cos(2 * np.pi * (t - self.phase) / self.period)

    def derivative(self, t: ArrayLike) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        omega = 2 * np.pi / self.period
        return -self.amplitude * omega * np.sin(omega * (t - self.phase))

    @property
    def upper_bound(self) -> float:
        return self.level + self.amplitude

    @property
    def lower_bound(self) -> float:
        return self.level - self.amplitude


Beta = Union[ConstantBeta, SeasonalBeta]


def as_beta(beta: Union[float, Beta, Dict[str, Any]]) -> Beta:
    if isinstance(beta, (ConstantBeta, SeasonalBeta)):
        return beta
    if isinstance(beta, dict):
        kind = beta.get('kind', 'constant')
        params = {k: v for k, v in beta.items() if k != 'kind'}
        if kind == 'constant':
            return ConstantBeta(**params)
        if kind == 'seasonal':
            return SeasonalBeta(**params)
        raise ModelSpecError(f"Unknown beta kind '{kind}'")
    return ConstantBeta(float(beta))


# ---------------------------------------------------------------------------
# PointwiseMap
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PointwiseMap:
    """A kernel psi(t, y) with its partial derivatives and a domain tag."""

    psi: Kernel
    d_psi_dy: Kernel
    domain: Domain = Domain.ALL_REALS
    family: Family = Family.CUSTOM
    name: str = 'custom'
    d_psi_dt: Optional[Kernel] = None
    d2_psi_dy2: Optional[Kernel] = None
    params: Dict[str, Any] = field(default_factory=dict)
    lipschitz_unsafe: bool = False
    time_factor: Optional[Beta] = None
    base: Optional['PointwiseMap'] = None

    def _evaluate(self, fn: Kernel, t: ArrayLike, y: ArrayLike) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        inside = self.domain.contains(y)
        if not np.all(inside):
            bad = np.flatnonzero(~np.atleast_1d(inside))[0]
            value = float(np.atleast_1d(y)[bad])
            raise CurveDomainError(
                f"{self.name}: y={value} is outside the {self.domain.value} domain",
                node=int(bad), value=value,
            )
        if self.domain is Domain.POS and np.any(y == 0):
            return self._limit_at_zero(fn, t, y)
        with np.errstate(divide='ignore', invalid='ignore'):
            return np.asarray(fn(t, y), dtype=float)

    def _limit_at_zero(self, fn: Kernel, t: ArrayLike, y: np.ndarray) -> np.ndarray:
        at_zero = y == 0
        with np.errstate(divide='ignore', invalid='ignore'):
            near = np.asarray(fn(t, np.where(at_zero, _ZERO_PROBES[0], y)), dtype=float)
            nearer = np.asarray(fn(t, np.where(at_zero, _ZERO_PROBES[1], y)), dtype=float)
        near, nearer = np.broadcast_arrays(near, nearer)
        mask = np.broadcast_to(at_zero, near.shape)
        a, b = near[mask], nearer[mask]
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))
                and np.all(np.abs(a - b) <= 1e-6 * np.maximum(1.0, np.abs(b)))):
            raise CurveDomainError(
                f"{self.name}: no numeric limit at y=0 on the (0, inf) domain", value=0.0
            )
        return np.where(mask, nearer, near)

    def __call__(self, t: ArrayLike, y: ArrayLike) -> np.ndarray:
        return self._evaluate(self.psi, t, y)

    def derivative_y(self, t: ArrayLike, y: ArrayLike) -> np.ndarray:
        return self._evaluate(self.d_psi_dy, t, y)

    @property
    def has_second_order(self) -> bool:
        return self.d_psi_dt is not None and self.d2_psi_dy2 is not None

    def describe(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'family': self.family.value,
            'domain': self.domain.value,
            'params': dict(self.params),
            'lipschitz_unsafe': self.lipschitz_unsafe,
        }


@dataclass(frozen=True, eq=False)
class CoefficientSpec:
    """Drift kernel a(t, y) and diffusion kernel psi(t, y) of the curve SPDE."""

    drift: PointwiseMap
    diffusion: PointwiseMap

    def __post_init__(self):
        if not self.drift.domain.includes(self.diffusion.domain):
            raise ModelSpecError(
                f"Diffusion domain {self.diffusion.domain.value} is not contained in drift "
                f"domain {self.drift.domain.value}"
            )

    def drift_curve(self, t: float, g: CurveGrid) -> CurveGrid:
        return lift(self.drift, t, g)

    def diffusion_curve(self, t: float, g: CurveGrid) -> CurveGrid:
        return lift(self.diffusion, t, g)

    def describe(self) -> Dict[str, Any]:
        return {'drift': self.drift.describe(), 'diffusion': self.diffusion.describe()}


def lift(psi_map: PointwiseMap, t: float, f: CurveGrid) -> CurveGrid:
    """Psi(t, f)(x) = psi(t, f(x)) node-wise, tail included"""
    if t < 0:
        raise CurveDomainError(f"lift requires t >= 0, got {t}", value=t)
    inside = psi_map.domain.contains(f.values)
    if not np.all(inside):
        idx = int(np.flatnonzero(~inside)[0])
        raise CurveDomainError(
            f"{psi_map.name}: node {idx} has value {f.values[idx]} outside the "
            f"{psi_map.domain.value} domain",
            node=idx, value=float(f.values[idx]),
        )
    if not psi_map.domain.contains(f.tail):
        raise CurveDomainError(
            f"{psi_map.name}: tail value {f.tail} outside the {psi_map.domain.value} domain",
            node='tail', value=f.tail,
        )
    values = psi_map(t, f.values) * np.ones(f.space.n_nodes)
    tail = float(psi_map(t, np.array([f.tail]))[0])
    return CurveGrid(values, f.space, tail)


# ---------------------------------------------------------------------------
# built-in families
# ---------------------------------------------------------------------------

def make_cev(gamma: float, beta: Union[float, Beta] = 1.0) -> PointwiseMap:
    """psi(t, y) = beta(t) y**gamma on y >= 0"""
    if gamma < 1:
        raise CevParameterError(
            f"CEV exponent gamma={gamma} < 1 rejected: for 0 < gamma < 1 the lifted kernel "
            f"f**gamma has a derivative gamma f**(gamma-1) f' that is not square integrable "
            f"where f approaches 0, so its norm blows up; use gamma >= 1"
        )
    beta = as_beta(beta)

    def psi(t, y):
        return beta(t) * np.power(y, gamma)

    def d_psi_dy(t, y):
        return gamma * beta(t) * np.power(y, gamma - 1)

    def d2_psi_dy2(t, y):
        if gamma == 1:
            return beta(t) * np.zeros_like(np.asarray(y, dtype=float))
        with np.errstate(divide='ignore'):
            return gamma * (gamma - 1) * beta(t) * np.power(y, gamma - 2)

    def d_psi_dt(t, y):
        return beta.derivative(t) * np.power(y, gamma)

    return PointwiseMap(
        psi=psi,
        d_psi_dy=d_psi_dy,
        d_psi_dt=d_psi_dt,
        d2_psi_dy2=d2_psi_dy2,
        domain=Domain.NONNEG,
        family=Family.CEV,
        name=f'cev(gamma={gamma})',
        params={'gamma': gamma, 'beta': _beta_params(beta)},
        lipschitz_unsafe=1 < gamma < 2,
        time_factor=beta,
    )


def _beta_params(beta: Beta) -> Dict[str, Any]:
    if isinstance(beta, SeasonalBeta):
        return {'kind': 'seasonal', 'level': beta.level, 'amplitude': beta.amplitude,
                'period': beta.period, 'phase': beta.phase}
    return {'kind': 'constant', 'level': beta.level}


def _cev_bridge(gamma: float, eps: float, y: np.ndarray):
    """gamma_tilde and its first two derivatives: 1 on [0, eps], gamma on [2 eps, inf)"""
    s = np.clip((y - eps) / eps, 0.0, 1.0)
    inside = (y > eps) & (y < 2 * eps)
    g = 1.0 + (gamma - 1) * (3 * s ** 2 - 2 * s ** 3)
    dg = (gamma - 1) * 6 * s * (1 - s) / eps
    d2g = np.where(inside, (gamma - 1) * (6 - 12 * s) / eps ** 2, 0.0)
    return g, dg, d2g


def make_cev_tilde(gamma: float, eps: float, beta: Union[float, Beta] = 1.0) -> PointwiseMap:
    """psi(t, y) = beta(t) y**gamma_tilde(y) with a cubic Hermite bridge from 1 to gamma"""
    if gamma <= 1:
        raise CevParameterError(f"cev_tilde needs gamma > 1, got {gamma}")
    if not eps > 0:
        raise ModelSpecError(f"cev_tilde needs eps > 0, got {eps}")
    beta = as_beta(beta)

    def phi(y):
        y = np.asarray(y, dtype=float)
        g, _, _ = _cev_bridge(gamma, eps, y)
        return np.power(y, g)

    def d_phi(y):
        y = np.asarray(y, dtype=float)
        g, dg, _ = _cev_bridge(gamma, eps, y)
        log_y = np.log(np.where(y > 0, y, 1.0))
        return g * np.power(y, g - 1) + np.power(y, g) * log_y * dg

    def d2_phi(y):
        y = np.asarray(y, dtype=float)
        g, dg, d2g = _cev_bridge(gamma, eps, y)
        positive = y > 0
        safe_y = np.where(positive, y, 1.0)
        log_y = np.log(safe_y)
        power = np.power(y, g)
        bridge = power * (dg ** 2 * log_y ** 2 + d2g * log_y + 2 * dg * (g * log_y + 1) / safe_y)
        with np.errstate(divide='ignore', invalid='ignore'):
            curvature = np.where(g > 1, g * (g - 1) * np.power(safe_y, g - 2), 0.0)
        return np.where(positive, bridge + curvature, 0.0)

    return PointwiseMap(
        psi=lambda t, y: beta(t) * phi(y),
        d_psi_dy=lambda t, y: beta(t) * d_phi(y),
        d_psi_dt=lambda t, y: beta.derivative(t) * phi(y),
        d2_psi_dy2=lambda t, y: beta(t) * d2_phi(y),
        domain=Domain.NONNEG,
        family=Family.CEV_TILDE,
        name=f'cev_tilde(gamma={gamma}, eps={eps})',
        params={'gamma': gamma, 'eps': eps, 'beta': _beta_params(beta)},
        time_factor=beta,
    )


def make_exp_form(psi_tilde: PointwiseMap) -> PointwiseMap:
    """psi(t, y) = y * psi_tilde(t, y), the geometric form of a kernel"""
    # the product is a price-level kernel, so an unrestricted psi_tilde is used on y >= 0
    domain = psi_tilde.domain if psi_tilde.domain is not Domain.ALL_REALS else Domain.NONNEG
    d_dt = None
    if psi_tilde.d_psi_dt is not None:
        d_dt = lambda t, y: np.asarray(y, dtype=float) * psi_tilde.d_psi_dt(t, y)  # noqa: E731
    d2 = None
    if psi_tilde.d2_psi_dy2 is not None:
        d2 = lambda t, y: (2 * psi_tilde.d_psi_dy(t, y)  # noqa: E731
                           + np.asarray(y, dtype=float) * psi_tilde.d2_psi_dy2(t, y))

    return PointwiseMap(
        psi=lambda t, y: np.asarray(y, dtype=float) * psi_tilde.psi(t, y),
        d_psi_dy=lambda t, y: psi_tilde.psi(t, y) + np.asarray(y, dtype=float) * psi_tilde.d_psi_dy(t, y),
        d_psi_dt=d_dt,
        d2_psi_dy2=d2,
        domain=domain,
        family=Family.EXP_FORM,
        name=f'exp_form({psi_tilde.name})',
        params={'psi_tilde': psi_tilde.describe()},
        base=psi_tilde,
    )


def make_separable(beta: Union[float, Beta], phi: PointwiseMap) -> PointwiseMap:
    """psi(t, y) = beta(t) phi(t, y)"""
    beta = as_beta(beta)
    d_dt = None
    if phi.d_psi_dt is not None:
        d_dt = lambda t, y: beta.derivative(t) * phi.psi(t, y) + beta(t) * phi.d_psi_dt(t, y)  # noqa: E731
    d2 = None
    if phi.d2_psi_dy2 is not None:
        d2 = lambda t, y: beta(t) * phi.d2_psi_dy2(t, y)  # noqa: E731

    return PointwiseMap(
        psi=lambda t, y: beta(t) * phi.psi(t, y),
        d_psi_dy=lambda t, y: beta(t) * phi.d_psi_dy(t, y),
        d_psi_dt=d_dt,
        d2_psi_dy2=d2,
        domain=phi.domain,
        family=Family.SEPARABLE,
        name=f'separable({phi.name})',
        params={'beta': _beta_params(beta), 'phi': phi.describe()},
        lipschitz_unsafe=phi.lipschitz_unsafe,
        time_factor=beta,
        base=phi,
    )


# ---------------------------------------------------------------------------
# named formula registry
# ---------------------------------------------------------------------------

def _zeros(t, y):
    return np.zeros(np.broadcast(np.asarray(t, dtype=float), np.asarray(y, dtype=float)).shape)


def _formula(name: str, psi: Kernel, d_dy: Kernel, d2_dy2: Kernel,
             domain: Domain = Domain.ALL_REALS, params: Optional[Dict[str, Any]] = None) -> PointwiseMap:
    return PointwiseMap(
        psi=psi,
        d_psi_dy=d_dy,
        d_psi_dt=_zeros,
        d2_psi_dy2=d2_dy2,
        domain=domain,
        family=Family.CUSTOM,
        name=name,
        params=params or {},
    )


def _identity(scale: float = 1.0):
    return _formula(
        'identity',
        lambda t, y: scale * np.asarray(y, dtype=float) + _zeros(t, y),
        lambda t, y: scale + _zeros(t, y),
        _zeros,
        params={'scale': scale},
    )


def _square(scale: float = 1.0):
    return _formula(
        'square',
        lambda t, y: scale * np.asarray(y, dtype=float) ** 2 + _zeros(t, y),
        lambda t, y: 2 * scale * np.asarray(y, dtype=float) + _zeros(t, y),
        lambda t, y: 2 * scale + _zeros(t, y),
        params={'scale': scale},
    )


def _sine(scale: float = 1.0):
    return _formula(
        'sine',
        lambda t, y: scale * np.sin(y) + _zeros(t, y),
        lambda t, y: scale * np.cos(y) + _zeros(t, y),
        lambda t, y: -scale * np.sin(y) + _zeros(t, y),
        params={'scale': scale},
    )


def _sqrt(scale: float = 1.0):
    return _formula(
        'sqrt',
        lambda t, y: scale * np.sqrt(y) + _zeros(t, y),
        lambda t, y: 0.5 * scale / np.sqrt(y) + _zeros(t, y),
        lambda t, y: -0.25 * scale * np.power(y, -1.5) + _zeros(t, y),
        domain=Domain.POS,
        params={'scale': scale},
    )


def _shifted_linear(scale: float = 1.0, offset: float = 1.0):
    return _formula(
        'shifted_linear',
        lambda t, y: scale * np.asarray(y, dtype=float) + offset + _zeros(t, y),
        lambda t, y: scale + _zeros(t, y),
        _zeros,
        params={'scale': scale, 'offset': offset},
    )


def _constant(value: float = 0.0):
    return _formula(
        'constant',
        lambda t, y: value + _zeros(t, y),
        _zeros,
        _zeros,
        params={'value': value},
    )


def _exp_decay(scale: float = 1.0, rate: float = 1.0):
    return _formula(
        'exp_decay',
        lambda t, y: scale * np.exp(-rate * np.asarray(y, dtype=float)) + _zeros(t, y),
        lambda t, y: -rate * scale * np.exp(-rate * np.asarray(y, dtype=float)) + _zeros(t, y),
        lambda t, y: rate ** 2 * scale * np.exp(-rate * np.asarray(y, dtype=float)) + _zeros(t, y),
        params={'scale': scale, 'rate': rate},
    )


def _mean_reverting(kappa: float = 1.0, theta: float = 0.0):
    return _formula(
        'mean_reverting',
        lambda t, y: kappa * (theta - np.asarray(y, dtype=float)) + _zeros(t, y),
        lambda t, y: -kappa + _zeros(t, y),
        _zeros,
        params={'kappa': kappa, 'theta': theta},
    )


def _zero():
    return _constant(0.0)


FORMULA_REGISTRY: Dict[str, Callable[..., PointwiseMap]] = {
    'identity': _identity,
    'proportional': _identity,
    'square': _square,
    'sine': _sine,
    'sqrt': _sqrt,
    'shifted_linear': _shifted_linear,
    'constant': _constant,
    'exp_decay': _exp_decay,
    'mean_reverting': _mean_reverting,
    'zero': _zero,
}


def make_custom(formula: str, domain: Optional[Union[str, Domain]] = None, **params) -> PointwiseMap:
    """Build a registered formula, optionally narrowing its domain"""
    if formula not in FORMULA_REGISTRY:
        raise ModelSpecError(
            f"Unknown formula '{formula}'. Available: {sorted(FORMULA_REGISTRY)}"
        )
    try:
        psi_map = FORMULA_REGISTRY[formula](**params)
    except TypeError as e:
        raise ModelSpecError(f"Bad parameters for formula '{formula}': {e}") from e
    if domain is not None:
        domain = Domain(domain)
        if not psi_map.domain.includes(domain):
            raise ModelSpecError(
                f"Formula '{formula}' is defined on {psi_map.domain.value}, cannot widen to {domain.value}"
            )
        psi_map = PointwiseMap(
            psi=psi_map.psi, d_psi_dy=psi_map.d_psi_dy, d_psi_dt=psi_map.d_psi_dt,
            d2_psi_dy2=psi_map.d2_psi_dy2, domain=domain, family=psi_map.family,
            name=psi_map.name, params=psi_map.params,
        )
    return psi_map


def zero_coefficients() -> CoefficientSpec:
    return CoefficientSpec(drift=make_custom('zero'), diffusion=make_custom('zero'))


# ---------------------------------------------------------------------------
# condition estimators
# ---------------------------------------------------------------------------

@dataclass
class GrowthEstimate:
    g_hat: float
    deriv_sup: float
    verdict: bool
    history: List[Dict[str, float]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {'G_hat': self.g_hat, 'deriv_sup': self.deriv_sup, 'verdict': self.verdict,
                'history': self.history}


@dataclass
class PositivityReport:
    zero_set_ok: bool
    drift_ratio_ok: bool
    slope_ok: bool
    curvature_ok: bool
    inf_drift_ratio: float
    inf_slope: float
    inf_curvature: float

    @property
    def all_passed(self) -> bool:
        return self.zero_set_ok and self.drift_ratio_ok and self.slope_ok and self.curvature_ok

    def to_dict(self) -> Dict[str, Any]:
        return {
            'zero_set_ok': self.zero_set_ok,
            'drift_ratio_ok': self.drift_ratio_ok,
            'slope_ok': self.slope_ok,
            'curvature_ok': self.curvature_ok,
            'inf_drift_ratio': self.inf_drift_ratio,
            'inf_slope': self.inf_slope,
            'inf_curvature': self.inf_curvature,
            'all_passed': self.all_passed,
        }


@dataclass
class LocalBoundEstimate:
    psi_sup: float
    deriv_sup: float
    norm_bound: float


class ConditionEstimator:
    """Lattice estimators for Lipschitz, growth, boundedness and positivity conditions."""

    def __init__(self, space: Optional[SpaceConfig] = None, lattice: Optional[LatticeConfig] = None):
        self.lattice = lattice or config.lattice
        if space is not None:
            self.k_delta = space.k_delta
        else:
            self.k_delta = math.sqrt(2.0 * max(1.0, 1.0 / config.grid.weight_param))
        self.logger = logging.getLogger(__name__)

    # -- lattices ----------------------------------------------------------

    def _t_lattice(self, t_max: float) -> np.ndarray:
        if t_max <= 0:
            return np.zeros(1)
        return np.linspace(0.0, t_max, self.lattice.n_t)

    def _positive_axis(self, radius: float, include_zero: bool) -> np.ndarray:
        uniform = np.linspace(0.0, radius, self.lattice.n_y)
        refined = np.geomspace(radius * 2.0 ** -self.lattice.zero_refinement, radius,
                               8 * self.lattice.zero_refinement)
        axis = np.union1d(uniform, refined)
        if not include_zero:
            axis = axis[axis > 0]
        return axis

    def _y_lattice(self, domain: Domain, radius: float) -> np.ndarray:
        if domain is Domain.ALL_REALS:
            half = self._positive_axis(radius, include_zero=True)
            return np.union1d(-half, half)
        return self._positive_axis(radius, include_zero=domain is Domain.NONNEG)

    def _open_interval(self, eps: float) -> np.ndarray:
        """Lattice on (0, eps), refined toward 0"""
        uniform = np.linspace(0.0, eps, self.lattice.n_y + 2)[1:-1]
        refined = np.geomspace(eps * 2.0 ** -self.lattice.zero_refinement, eps,
                               8 * self.lattice.zero_refinement)[:-1]
        return np.union1d(uniform, refined)

    @staticmethod
    def _on_lattice(fn: Kernel, t: np.ndarray, y: np.ndarray) -> np.ndarray:
        with np.errstate(all='ignore'):
            values = np.asarray(fn(t[:, None], y[None, :]), dtype=float)
        return np.broadcast_to(values, (t.size, y.size))

    def _capped_sup(self, values: np.ndarray) -> float:
        if not np.all(np.isfinite(values)):
            return math.inf
        sup = float(np.max(np.abs(values)))
        return math.inf if sup > self.lattice.derivative_cap else sup

    def _floored_inf(self, values: np.ndarray) -> float:
        if not np.all(np.isfinite(values)):
            return -math.inf
        inf = float(np.min(values))
        return -math.inf if inf < self.lattice.inf_floor else inf

    def _second_derivative(self, psi_map: PointwiseMap, t: np.ndarray, y: np.ndarray) -> np.ndarray:
        if psi_map.d2_psi_dy2 is not None:
            return self._on_lattice(psi_map.d2_psi_dy2, t, y)
        slope = self._on_lattice(psi_map.d_psi_dy, t, y)
        return np.gradient(slope, y, axis=1)

    # -- estimators --------------------------------------------------------

    def estimate_local_lipschitz(self, psi_map: PointwiseMap, n: float, t_max: float) -> float:
        """sup |d psi/dy| over t in [0, t_max], |y| <= n K_delta; inf when above the cap"""
        if not n > 0:
            raise ValueError(f"n must be positive, got {n}")
        radius = n * self.k_delta
        t = self._t_lattice(t_max)

        if psi_map.family is Family.SEPARABLE and psi_map.base is not None:
            # |beta| is bounded, so the phi factor alone decides finiteness
            phi_sup = self._capped_sup(
                self._on_lattice(psi_map.base.d_psi_dy, t, self._y_lattice(psi_map.domain, radius))
            )
            beta_sup = float(np.max(np.abs(psi_map.time_factor(t))))
            estimate = beta_sup * phi_sup
        else:
            y = self._y_lattice(psi_map.domain, radius)
            estimate = self._capped_sup(self._on_lattice(psi_map.d_psi_dy, t, y))

        self.logger.debug(f"Local Lipschitz estimate for {psi_map.name} at n={n}: {estimate}")
        return estimate

    def estimate_linear_growth(self, psi_map: PointwiseMap, t_max: float) -> GrowthEstimate:
        t = self._t_lattice(t_max)
        history = []
        for k in range(self.lattice.max_doublings + 1):
            radius = self.lattice.growth_base_range * 2.0 ** k
            y = self._y_lattice(psi_map.domain, radius)
            psi_values = self._on_lattice(psi_map.psi, t, y)
            ratio = psi_values / (1.0 + np.abs(y))[None, :]
            history.append({
                'range': radius,
                'G_hat': self._capped_sup(ratio),
                'deriv_sup': self._capped_sup(self._on_lattice(psi_map.d_psi_dy, t, y)),
            })

        last, previous = history[-1], history[-2]
        tol = self.lattice.growth_tolerance
        verdict = (_stable(previous['G_hat'], last['G_hat'], tol)
                   and _stable(previous['deriv_sup'], last['deriv_sup'], tol))
        self.logger.debug(f"Linear growth for {psi_map.name}: G={last['G_hat']}, verdict={verdict}")
        return GrowthEstimate(last['G_hat'], last['deriv_sup'], verdict, history)

    def estimate_local_bound(self, psi_map: PointwiseMap, n: float, t_max: float) -> LocalBoundEstimate:
        """Bound on ||Psi(t, f)|| over ||f|| <= n from sup |psi| and sup |d psi/dy|"""
        radius = n * self.k_delta
        t = self._t_lattice(t_max)
        y = self._y_lattice(psi_map.domain, radius)
        psi_sup = self._capped_sup(self._on_lattice(psi_map.psi, t, y))
        deriv_sup = self._capped_sup(self._on_lattice(psi_map.d_psi_dy, t, y))
        return LocalBoundEstimate(psi_sup, deriv_sup, math.sqrt(psi_sup ** 2 + (deriv_sup * n) ** 2))

    def lipschitz_constant_bound(self, psi_map: PointwiseMap, n: float, t_max: float) -> float:
        """L_n = (K^2 D^2 + 2 D^2 + 2 K^2 D2^2 n^2)^(1/2) with K = K_delta, D2 = sup |psi_yy|"""
        radius = n * self.k_delta
        t = self._t_lattice(t_max)
        y = self._y_lattice(psi_map.domain, radius)
        slope_sup = self._capped_sup(self._on_lattice(psi_map.d_psi_dy, t, y))
        curvature_sup = self._capped_sup(self._second_derivative(psi_map, t, y))
        k = self.k_delta
        return math.sqrt(k ** 2 * slope_sup ** 2 + 2 * slope_sup ** 2
                         + 2 * k ** 2 * curvature_sup ** 2 * n ** 2)

    def check_derivative_consistency(self, psi_map: PointwiseMap, t_max: float,
                                     radius: float = 4.0) -> Dict[str, Any]:
        t = self._t_lattice(t_max)
        if psi_map.domain is Domain.ALL_REALS:
            y = np.linspace(-radius, radius, self.lattice.n_y)
        else:
            y = np.linspace(0.0, radius, self.lattice.n_y + 1)[1:]
        h = 1e-6 * np.maximum(1.0, np.abs(y))
        if psi_map.domain is not Domain.ALL_REALS:
            keep = y - h > 0
            y, h = y[keep], h[keep]

        analytic = self._on_lattice(psi_map.d_psi_dy, t, y)
        upper = self._on_lattice(psi_map.psi, t, y + h)
        lower = self._on_lattice(psi_map.psi, t, y - h)
        finite_diff = (upper - lower) / (2 * h)[None, :]
        error = np.abs(analytic - finite_diff) / np.maximum(np.abs(analytic), 1.0)
        max_error = float(np.max(error))
        return {'max_relative_error': max_error,
                'passed': bool(max_error <= self.lattice.derivative_rtol)}

    def check_positivity_conditions(self, psi_map: PointwiseMap, eps: float, t_max: float) -> PositivityReport:
        if psi_map.domain is Domain.ALL_REALS:
            raise ModelSpecError(
                f"{psi_map.name}: positivity conditions need a nonneg or pos domain"
            )
        if not psi_map.has_second_order:
            raise CapabilityError(
                f"{psi_map.name}: positivity conditions need d_psi_dt and d2_psi_dy2"
            )
        if not eps > 0:
            raise ValueError(f"eps must be positive, got {eps}")

        t = self._t_lattice(t_max)

        # zero set: psi > 0 for y > 0, psi(t, 0) = 0 where 0 is in the domain
        zero_range = self.lattice.growth_base_range * 2.0 ** self.lattice.max_doublings
        y_pos = self._positive_axis(max(zero_range, 2 * eps), include_zero=False)
        positive = self._on_lattice(psi_map.psi, t, y_pos)
        zero_set_ok = bool(np.all(np.isfinite(positive)) and np.all(positive > 0))
        if psi_map.domain is Domain.NONNEG:
            at_zero = self._on_lattice(psi_map.psi, t, np.zeros(1))
            zero_set_ok = zero_set_ok and bool(np.all(np.abs(at_zero) <= 1e-14))

        y = self._open_interval(eps)
        psi_values = self._on_lattice(psi_map.psi, t, y)
        with np.errstate(divide='ignore', invalid='ignore'):
            drift_ratio = self._on_lattice(psi_map.d_psi_dt, t, y) / psi_values
        inf_drift_ratio = self._floored_inf(drift_ratio)
        inf_slope = self._floored_inf(self._on_lattice(psi_map.d_psi_dy, t, y))
        inf_curvature = self._floored_inf(psi_values * self._on_lattice(psi_map.d2_psi_dy2, t, y))

        report = PositivityReport(
            zero_set_ok=zero_set_ok,
            drift_ratio_ok=math.isfinite(inf_drift_ratio),
            slope_ok=math.isfinite(inf_slope),
            curvature_ok=math.isfinite(inf_curvature),
            inf_drift_ratio=inf_drift_ratio,
            inf_slope=inf_slope,
            inf_curvature=inf_curvature,
        )
        self.logger.info(f"Positivity conditions for {psi_map.name}: {report.to_dict()}")
        return report

    def check_exp_form_positivity(self, psi_tilde: PointwiseMap, eps: float, t_max: float) -> Dict[str, Any]:
        """Conditions on psi_tilde keeping the geometric-form SPDE in H_>"""
        if not psi_tilde.has_second_order:
            raise CapabilityError(
                f"{psi_tilde.name}: exp-form positivity needs d_psi_dt and d2_psi_dy2"
            )
        t = self._t_lattice(t_max)
        y = self._open_interval(eps)
        base = self._on_lattice(psi_tilde.psi, t, y)
        with np.errstate(divide='ignore', invalid='ignore'):
            drift_ratio = self._on_lattice(psi_tilde.d_psi_dt, t, y) / base
        slope = y[None, :] * self._on_lattice(psi_tilde.d_psi_dy, t, y)
        curvature = y[None, :] * base * self._on_lattice(psi_tilde.d2_psi_dy2, t, y)

        result = {
            'nonnegative_ok': bool(np.all(np.isfinite(base)) and np.all(base >= 0)),
            'inf_drift_ratio': self._floored_inf(drift_ratio),
            'inf_slope': self._floored_inf(slope),
            'inf_curvature': self._floored_inf(curvature),
        }
        result['all_passed'] = bool(
            result['nonnegative_ok']
            and all(math.isfinite(result[k]) for k in ('inf_drift_ratio', 'inf_slope', 'inf_curvature'))
        )
        return result


def _stable(previous: float, current: float, tol: float) -> bool:
    if not (math.isfinite(previous) and math.isfinite(current)):
        return False
    scale = max(abs(previous), abs(current))
    if scale == 0:
        return True
    return abs(current - previous) <= tol * scale
