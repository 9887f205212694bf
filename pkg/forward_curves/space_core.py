"""
Discretized forward-curve space with exponential weight w(x) = exp(c x).

Curves live on a uniform maturity grid [0, x_max] and carry a tail value used
beyond x_max. The inner product is f(0)g(0) + int f'(x) g'(x) w(x) dx, with f'
taken as the slope on each grid interval (the central difference at the
interval midpoint) and the weight averaged over the interval (trapezoid rule).
"""

import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Callable, Optional, Union

import numpy as np

from config.config import config
from forward_curves.errors import CurveDomainError, StructuralError

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class SpaceConfig:
    """Weight, grid and the derived norm constants of the curve space."""

    weight_param: float
    x_max: float
    n_nodes: int
    spacing: str = 'uniform'

    def __post_init__(self):
        if not self.weight_param > 0:
            raise ValueError(f"weight_param must be positive, got {self.weight_param}")
        if not self.x_max > 0:
            raise ValueError(f"x_max must be positive, got {self.x_max}")
        if self.n_nodes < 3:
            raise ValueError(f"n_nodes must be >= 3, got {self.n_nodes}")
        if self.spacing != 'uniform':
            raise ValueError(f"Unsupported spacing '{self.spacing}', only 'uniform' is implemented")

    @classmethod
    def default(cls, weight_param: Optional[float] = None, n_nodes: Optional[int] = None,
                x_max: Optional[float] = None) -> 'SpaceConfig':
        """Build a space from config.grid, deriving x_max from the tail mass if unset"""
        c = weight_param if weight_param is not None else config.grid.weight_param
        if x_max is None:
            x_max = config.grid.x_max
        if x_max is None:
            x_max = float(math.ceil(math.log(1.0 / config.grid.tail_mass) / c))
        return cls(
            weight_param=c,
            x_max=x_max,
            n_nodes=n_nodes if n_nodes is not None else config.grid.n_nodes,
        )

    @cached_property
    def nodes(self) -> np.ndarray:
        nodes = np.linspace(0.0, self.x_max, self.n_nodes)
        nodes.flags.writeable = False
        return nodes

    @property
    def dx(self) -> float:
        return self.x_max / (self.n_nodes - 1)

    @cached_property
    def weights(self) -> np.ndarray:
        weights = np.exp(self.weight_param * self.nodes)
        weights.flags.writeable = False
        return weights

    @cached_property
    def interval_weights(self) -> np.ndarray:
        # trapezoid average of w over each grid interval
        w = self.weights
        interval = 0.5 * (w[:-1] + w[1:])
        interval.flags.writeable = False
        return interval

    @property
    def w_bar(self) -> float:
        return self.weight_param ** -0.5

    @property
    def k_delta(self) -> float:
        return math.sqrt(2.0 * max(1.0, self.w_bar ** 2))

    @property
    def k_mult(self) -> float:
        return math.sqrt(5.0 + 4.0 * self.w_bar ** 2)

    def weight(self, x: ArrayLike) -> ArrayLike:
        return np.exp(self.weight_param * np.asarray(x, dtype=float))

    def node_multiple(self, dt: float) -> Optional[int]:
        """Number of grid spacings in dt, or None if dt is not a node multiple"""
        ratio = dt / self.dx
        k = int(round(ratio))
        if abs(ratio - k) <= config.simulation.node_multiple_tolerance * max(1.0, abs(ratio)):
            return k
        return None

    def node_index(self, x: float) -> Optional[int]:
        """Index of the node at maturity x, or None if x is off-grid or beyond x_max"""
        if x < 0 or x > self.x_max * (1 + 1e-12):
            return None
        return self.node_multiple(x)

    def describe(self) -> dict:
        return {
            'weight_param': self.weight_param,
            'x_max': self.x_max,
            'n_nodes': self.n_nodes,
            'spacing': self.spacing,
            'dx': self.dx,
            'w_bar': self.w_bar,
            'k_delta': self.k_delta,
            'k_mult': self.k_mult,
        }


@dataclass(frozen=True, eq=False)
class CurveGrid:
    """Node values of a curve plus its limit at infinity."""

    values: np.ndarray
    space: SpaceConfig
    tail: Optional[float] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (self.space.n_nodes,):
            raise StructuralError(
                f"Curve has shape {values.shape}, expected ({self.space.n_nodes},)"
            )
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise CurveDomainError(f"Non-finite curve value at node {bad}", node=bad, value=values[bad])
        values.flags.writeable = False
        tail = float(values[-1]) if self.tail is None else float(self.tail)
        if not math.isfinite(tail):
            raise CurveDomainError("Non-finite curve tail", node='tail', value=tail)
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'tail', tail)

    @classmethod
    def from_function(cls, space: SpaceConfig, fn: Callable[[np.ndarray], np.ndarray],
                      tail: Optional[float] = None) -> 'CurveGrid':
        return cls(np.asarray(fn(space.nodes), dtype=float) * np.ones(space.n_nodes), space, tail)

    @classmethod
    def constant(cls, space: SpaceConfig, value: float) -> 'CurveGrid':
        return cls(np.full(space.n_nodes, float(value)), space, float(value))

    @classmethod
    def zeros(cls, space: SpaceConfig) -> 'CurveGrid':
        return cls.constant(space, 0.0)

    def with_values(self, values: np.ndarray, tail: float) -> 'CurveGrid':
        return CurveGrid(values, self.space, tail)

    def _check_space(self, other: 'CurveGrid'):
        if other.space != self.space:
            raise StructuralError("Curves belong to different SpaceConfigs")

    def __add__(self, other: 'CurveGrid') -> 'CurveGrid':
        self._check_space(other)
        return CurveGrid(self.values + other.values, self.space, self.tail + other.tail)

    def __sub__(self, other: 'CurveGrid') -> 'CurveGrid':
        self._check_space(other)
        return CurveGrid(self.values - other.values, self.space, self.tail - other.tail)

    def __mul__(self, scalar: float) -> 'CurveGrid':
        return CurveGrid(self.values * scalar, self.space, self.tail * scalar)

    __rmul__ = __mul__

    def __neg__(self) -> 'CurveGrid':
        return self * -1.0

    def __repr__(self) -> str:
        return (f"CurveGrid(n_nodes={self.space.n_nodes}, f(0)={self.values[0]:.6g}, "
                f"tail={self.tail:.6g})")


class Cone(str, Enum):
    STRICTLY_POSITIVE = 'H_>'
    STRICTLY_NEGATIVE = 'H_<'
    POSITIVE_ON_NODES = 'H_+ strictly'
    POSITIVE = 'H_+'
    NONE = 'none'

    @property
    def invertible(self) -> bool:
        return self in (Cone.STRICTLY_POSITIVE, Cone.STRICTLY_NEGATIVE)


def _require_same_space(f: CurveGrid, g: CurveGrid):
    if f.space != g.space:
        raise StructuralError(
            f"SpaceConfig mismatch: {f.space.describe()} vs {g.space.describe()}"
        )


def slopes(f: CurveGrid) -> np.ndarray:
    """Weak derivative of f on each grid interval"""
    return np.diff(f.values) / f.space.dx


def inner_product(f: CurveGrid, g: CurveGrid) -> float:
    """f(0) g(0) + int_0^x_max f'(x) g'(x) w(x) dx on the grid.

    f' on each interval is the slope (f[i+1] - f[i]) / dx, the central difference
    at the interval midpoint, so no one-sided stencil is needed at either end.
    Each interval is weighted by the trapezoid average of w at its endpoints. The
    tail contributes nothing: curves are taken constant beyond x_max.
    """
    _require_same_space(f, g)
    space = f.space
    integrand = slopes(f) * slopes(g) * space.interval_weights
    return float(f.values[0] * g.values[0] + np.sum(integrand) * space.dx)


def norm(f: CurveGrid) -> float:
    return math.sqrt(max(inner_product(f, f), 0.0))


def delta_eval(f: CurveGrid, x: ArrayLike) -> ArrayLike:
    """Point evaluation f(x), linear between nodes and the tail beyond x_max"""
    xs = np.asarray(x, dtype=float)
    if np.any(xs < 0):
        raise CurveDomainError(f"Point evaluation requires x >= 0, got {np.min(xs)}", value=float(np.min(xs)))
    result = np.interp(xs, f.space.nodes, f.values, right=f.tail)
    if np.ndim(result) == 0:
        return float(result)
    return result


def delta_dual(c_val: float, x: float, space: Optional[SpaceConfig] = None) -> CurveGrid:
    """Representer of c_val * delta_x: y -> c_val (1 + int_0^{min(x,y)} 1/w)"""
    if x < 0:
        raise CurveDomainError(f"delta_dual requires x >= 0, got {x}", value=x)
    space = space or SpaceConfig.default()
    c = space.weight_param
    capped = np.minimum(space.nodes, x)
    values = c_val * (1.0 + (1.0 - np.exp(-c * capped)) / c)
    tail = c_val * (1.0 + (1.0 - math.exp(-c * x)) / c)
    return CurveGrid(values, space, tail)


def shift(f: CurveGrid, dt: float) -> CurveGrid:
    """Shift semigroup (S_dt f)(x) = f(x + dt)"""
    if dt < 0:
        raise CurveDomainError(f"Shift requires dt >= 0, got {dt}", value=dt)
    if dt == 0:
        return f

    space = f.space
    k = space.node_multiple(dt)
    if k is not None:
        if k >= space.n_nodes:
            values = np.full(space.n_nodes, f.tail)
        else:
            values = np.concatenate([f.values[k:], np.full(k, f.tail)])
    else:
        values = np.interp(space.nodes + dt, space.nodes, f.values, right=f.tail)
    return CurveGrid(values, space, f.tail)


def cone_membership(f: CurveGrid) -> Cone:
    values, tail = f.values, f.tail
    if np.all(values > 0) and tail > 0:
        return Cone.STRICTLY_POSITIVE
    if np.all(values < 0) and tail < 0:
        return Cone.STRICTLY_NEGATIVE
    if np.all(values > 0) and tail >= 0:
        return Cone.POSITIVE_ON_NODES
    if np.all(values >= 0) and tail >= 0:
        return Cone.POSITIVE
    return Cone.NONE
