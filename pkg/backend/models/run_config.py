"""
Run configuration for the command-line front-end.

A run configuration is a JSON document with the sections below. Every section
is a dataclass; unknown keys are rejected, omitted keys take the defaults, and
`RunConfig.resolved()` echoes the complete document so it can be fed back in.
"""

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from config.config import config
from forward_curves.errors import ConfigError
from forward_curves.noise import EIGEN_SHAPES, CovarianceOperator
from forward_curves.pointwise import (
    FORMULA_REGISTRY,
    CoefficientSpec,
    Family,
    PointwiseMap,
    make_cev,
    make_cev_tilde,
    make_custom,
    make_exp_form,
    make_separable,
)
from forward_curves.solver import SimConfig
from forward_curves.space_core import CurveGrid, SpaceConfig

INITIAL_SHAPES = ('constant', 'exp_decay', 'saturating')


@dataclass
class SpaceSection:
    weight_param: float = field(default_factory=lambda: config.grid.weight_param)
    x_max: Optional[float] = None
    n_nodes: int = field(default_factory=lambda: config.grid.n_nodes)


@dataclass
class NoiseSection:
    eigenpairs: List[Dict[str, Any]] = field(
        default_factory=lambda: [{'lambda': 0.09, 'shape': 'const', 'params': {}}]
    )
    orthonormalize: bool = True


@dataclass
class ModelSection:
    family: str = 'cev'
    params: Dict[str, Any] = field(default_factory=lambda: {'gamma': 1.0, 'beta': 1.0})
    drift_family: str = 'zero'
    drift_params: Dict[str, Any] = field(default_factory=dict)


@dataclass
class InitialCurveSection:
    """g0(x): constant value, a + b exp(-r x) ('exp_decay') or a + b (1 - exp(-r x)) ('saturating')"""
    shape: str = 'constant'
    params: Dict[str, float] = field(default_factory=lambda: {'value': 1.0})


@dataclass
class SimSection:
    dt: float = 0.01
    horizon: float = 1.0
    n_paths: int = 100
    master_seed: int = field(default_factory=lambda: config.simulation.master_seed)
    blowup_norm: float = field(default_factory=lambda: config.simulation.blowup_norm)
    snapshot_stride: int = field(default_factory=lambda: config.simulation.snapshot_stride)
    positivity_monitor: bool = field(default_factory=lambda: config.simulation.positivity_monitor)


@dataclass
class OutputSection:
    directory: str = 'output'
    formats: List[str] = field(default_factory=lambda: ['csv'])


@dataclass
class CheckSection:
    n_values: List[float] = field(default_factory=lambda: [1.0, 2.0, 4.0])
    eps: float = 0.1
    t_max: float = 1.0
    require: Optional[List[str]] = None  # None: derivatives, lipschitz, and positivity on y >= 0 domains


@dataclass
class CompareSection:
    maturities: List[float] = field(default_factory=list)
    levels: int = 0
    absorb_at_zero: bool = True
    exp_check: bool = False
    exp_levels: int = 3


@dataclass
class GirsanovSection:
    enabled: bool = False
    direction: float = -1.0  # -1: weights remove the drift from simulated paths; +1: paths run driftless, weights add it
    T_bar: Optional[float] = None  # None: sim.horizon
    reweight_x: float = 0.0


SECTIONS = {
    'space': SpaceSection,
    'noise': NoiseSection,
    'model': ModelSection,
    'initial_curve': InitialCurveSection,
    'sim': SimSection,
    'outputs': OutputSection,
    'check': CheckSection,
    'compare': CompareSection,
    'girsanov': GirsanovSection,
}

REQUIREMENTS = ('derivatives', 'lipschitz', 'linear_growth', 'positivity')


def _section_from_dict(name: str, cls, data: Any):
    if not isinstance(data, dict):
        raise ConfigError(f"Section '{name}' must be an object, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown keys in section '{name}': {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid section '{name}': {e}") from e


@dataclass
class RunConfig:
    space: SpaceSection = field(default_factory=SpaceSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    model: ModelSection = field(default_factory=ModelSection)
    initial_curve: InitialCurveSection = field(default_factory=InitialCurveSection)
    sim: SimSection = field(default_factory=SimSection)
    outputs: OutputSection = field(default_factory=OutputSection)
    check: CheckSection = field(default_factory=CheckSection)
    compare: CompareSection = field(default_factory=CompareSection)
    girsanov: GirsanovSection = field(default_factory=GirsanovSection)

    @classmethod
    def from_dict(cls, data: Any) -> 'RunConfig':
        if not isinstance(data, dict):
            raise ConfigError("Run configuration must be a JSON object")
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"Unknown top-level keys: {unknown}")
        sections = {name: _section_from_dict(name, cls_, data[name])
                    for name, cls_ in SECTIONS.items() if name in data}
        run_config = cls(**sections)
        run_config.validate()
        return run_config

    @classmethod
    def from_file(cls, path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None) -> 'RunConfig':
        try:
            text = Path(path).read_text(encoding='utf-8')
        except OSError as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from e
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Malformed JSON in {path}: {e.msg} at line {e.lineno} column {e.colno}",
                              line=e.lineno, column=e.colno) from e
        run_config = cls.from_dict(data)
        if overrides:
            run_config.apply_overrides(overrides)
        return run_config

    def apply_overrides(self, overrides: Dict[str, Any]):
        mapping = {
            'seed': ('sim', 'master_seed'),
            'paths': ('sim', 'n_paths'),
            'dt': ('sim', 'dt'),
            'out': ('outputs', 'directory'),
        }
        for key, value in overrides.items():
            if value is None:
                continue
            if key == 'format':
                self.outputs.formats = [value]
            elif key in mapping:
                section, attr = mapping[key]
                setattr(getattr(self, section), attr, value)
            else:
                raise ConfigError(f"Unknown override '{key}'")
        self.validate()

    def validate(self):
        if self.space.weight_param <= 0:
            raise ConfigError(f"space.weight_param must be positive, got {self.space.weight_param}")
        if self.space.n_nodes < 3:
            raise ConfigError(f"space.n_nodes must be >= 3, got {self.space.n_nodes}")
        if self.space.x_max is not None and self.space.x_max <= 0:
            raise ConfigError(f"space.x_max must be positive, got {self.space.x_max}")

        if not self.noise.eigenpairs:
            raise ConfigError("noise.eigenpairs must not be empty")
        for i, pair in enumerate(self.noise.eigenpairs):
            if not isinstance(pair, dict):
                raise ConfigError(f"noise.eigenpairs[{i}] must be an object")
            unknown = sorted(set(pair) - {'lambda', 'shape', 'params'})
            if unknown:
                raise ConfigError(f"Unknown keys in noise.eigenpairs[{i}]: {unknown}")
            if 'lambda' not in pair or 'shape' not in pair:
                raise ConfigError(f"noise.eigenpairs[{i}] needs 'lambda' and 'shape'")
            if pair['shape'] not in EIGEN_SHAPES:
                raise ConfigError(f"noise.eigenpairs[{i}].shape '{pair['shape']}' is not one of "
                                  f"{sorted(EIGEN_SHAPES)}")
            pair.setdefault('params', {})

        families = {f.value for f in Family}
        if self.model.family not in families:
            raise ConfigError(f"model.family '{self.model.family}' is not one of {sorted(families)}")
        if self.model.drift_family not in FORMULA_REGISTRY and self.model.drift_family not in families:
            raise ConfigError(f"model.drift_family '{self.model.drift_family}' is unknown")

        if self.initial_curve.shape not in INITIAL_SHAPES:
            raise ConfigError(f"initial_curve.shape '{self.initial_curve.shape}' is not one of {INITIAL_SHAPES}")

        if self.sim.dt <= 0 or self.sim.horizon <= 0 or self.sim.n_paths < 1:
            raise ConfigError("sim.dt and sim.horizon must be positive and sim.n_paths >= 1")
        steps = round(self.sim.horizon / self.sim.dt)
        if steps < 1 or abs(steps * self.sim.dt - self.sim.horizon) > 1e-12 * max(1.0, self.sim.horizon):
            raise ConfigError(f"sim.dt={self.sim.dt} does not divide sim.horizon={self.sim.horizon}")

        for fmt in self.outputs.formats:
            if fmt not in ('csv', 'json'):
                raise ConfigError(f"outputs.formats entry '{fmt}' must be 'csv' or 'json'")

        if self.check.require is not None:
            unknown = sorted(set(self.check.require) - set(REQUIREMENTS))
            if unknown:
                raise ConfigError(f"check.require has unknown entries {unknown}; allowed {REQUIREMENTS}")
        if self.check.eps <= 0 or any(n <= 0 for n in self.check.n_values):
            raise ConfigError("check.eps and check.n_values must be positive")
        if self.compare.levels < 0 or self.compare.exp_levels < 1:
            raise ConfigError("compare.levels must be >= 0 and compare.exp_levels >= 1")

        if self.girsanov.direction not in (-1.0, 1.0):
            raise ConfigError(f"girsanov.direction must be -1 or 1, got {self.girsanov.direction}")
        if self.girsanov.reweight_x < 0:
            raise ConfigError(f"girsanov.reweight_x must be >= 0, got {self.girsanov.reweight_x}")
        T_bar = self.girsanov_horizon
        if not 0 < T_bar <= self.sim.horizon + 1e-12:
            raise ConfigError(f"girsanov.T_bar must lie in (0, sim.horizon], got {T_bar}")
        steps = round(T_bar / self.sim.dt)
        if steps < 1 or abs(steps * self.sim.dt - T_bar) > 1e-12 * max(1.0, T_bar):
            raise ConfigError(f"girsanov.T_bar={T_bar} is not a multiple of sim.dt={self.sim.dt}")

    @property
    def girsanov_horizon(self) -> float:
        return self.sim.horizon if self.girsanov.T_bar is None else self.girsanov.T_bar

    def resolved(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    # -- builders ------------------------------------------------------------

    def build_space(self) -> SpaceConfig:
        return SpaceConfig.default(
            weight_param=self.space.weight_param,
            n_nodes=self.space.n_nodes,
            x_max=self.space.x_max,
        )

    def build_noise(self, space: SpaceConfig) -> CovarianceOperator:
        return CovarianceOperator.from_shapes(space, self.noise.eigenpairs, self.noise.orthonormalize)

    def build_diffusion(self) -> PointwiseMap:
        return build_kernel(self.model.family, self.model.params)

    def build_coefficients(self) -> CoefficientSpec:
        diffusion = self.build_diffusion()
        if self.model.drift_family in FORMULA_REGISTRY:
            drift = make_custom(self.model.drift_family, **self.model.drift_params)
        else:
            drift = build_kernel(self.model.drift_family, self.model.drift_params)
        return CoefficientSpec(drift=drift, diffusion=diffusion)

    def build_initial_curve(self, space: SpaceConfig) -> CurveGrid:
        params = dict(self.initial_curve.params)
        try:
            if self.initial_curve.shape == 'constant':
                return CurveGrid.constant(space, float(params.get('value', 1.0)))
            a = float(params.get('level', 1.0))
            b = float(params.get('amplitude', 1.0))
            r = float(params.get('rate', 1.0))
            if self.initial_curve.shape == 'exp_decay':
                return CurveGrid(a + b * np.exp(-r * space.nodes), space, a)
            return CurveGrid(a + b * (1.0 - np.exp(-r * space.nodes)), space, a + b)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid initial_curve parameters: {e}") from e

    def build_sim(self, **changes) -> SimConfig:
        sim = SimConfig(
            dt=self.sim.dt,
            horizon=self.sim.horizon,
            n_paths=self.sim.n_paths,
            master_seed=self.sim.master_seed,
            blowup_norm=self.sim.blowup_norm,
            snapshot_stride=self.sim.snapshot_stride,
            positivity_monitor=self.sim.positivity_monitor,
        )
        if self.girsanov.enabled:
            # log weights need every step's curve and normals
            sim = dataclasses.replace(sim, snapshot_stride=1, record_increments=True)
        return dataclasses.replace(sim, **changes) if changes else sim


def build_kernel(family: str, params: Dict[str, Any]) -> PointwiseMap:
    """Build a named kernel family from JSON parameters"""
    params = dict(params)
    try:
        if family == Family.CEV.value:
            return make_cev(float(params.pop('gamma')), params.pop('beta', 1.0), **params)
        if family == Family.CEV_TILDE.value:
            return make_cev_tilde(float(params.pop('gamma')), float(params.pop('eps')),
                                  params.pop('beta', 1.0), **params)
        if family == Family.EXP_FORM.value:
            inner = params.pop('psi_tilde')
            _reject_extra(family, params)
            return make_exp_form(build_kernel(inner.get('family', 'custom'), inner.get('params', {})))
        if family == Family.SEPARABLE.value:
            inner = params.pop('phi')
            beta = params.pop('beta', 1.0)
            _reject_extra(family, params)
            return make_separable(beta, build_kernel(inner.get('family', 'custom'), inner.get('params', {})))
        if family == Family.CUSTOM.value:
            formula = params.pop('formula')
            return make_custom(formula, **params)
        if family in FORMULA_REGISTRY:
            return make_custom(family, **params)
    except KeyError as e:
        raise ConfigError(f"Model family '{family}' is missing parameter {e}") from e
    except TypeError as e:
        raise ConfigError(f"Bad parameters for model family '{family}': {e}") from e
    raise ConfigError(f"Unknown model family '{family}'")


def _reject_extra(family: str, params: Dict[str, Any]):
    if params:
        raise ConfigError(f"Unknown parameters for model family '{family}': {sorted(params)}")


def jsonable(value: Any) -> Any:
    """Replace NaN/inf with None and numpy scalars with Python ones, recursively"""
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value
