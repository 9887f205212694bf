import os
from dataclasses import dataclass, field
from typing import Optional
import json
import logging


@dataclass
class GridConfig:
    """Maturity grid defaults for the curve space"""
    weight_param: float = 1.0  # c in w(x) = exp(c x)
    n_nodes: int = 1401
    x_max: Optional[float] = None  # None -> derived so that 1/w(x_max) < 1e-6
    tail_mass: float = 1e-6
    eps_grid: float = 1e-2  # discretization slack on operator bounds

    def __post_init__(self):
        if self.weight_param <= 0:
            raise ValueError(f"weight_param must be positive, got {self.weight_param}")
        if self.n_nodes < 3:
            raise ValueError(f"n_nodes must be at least 3, got {self.n_nodes}")


@dataclass
class LatticeConfig:
    """Lattice settings for the coefficient condition estimators"""
    n_y: int = 512
    n_t: int = 64
    derivative_cap: float = 1e12
    inf_floor: float = -1e12
    growth_tolerance: float = 0.05
    max_doublings: int = 8
    growth_base_range: float = 1.0
    zero_refinement: int = 100  # dyadic levels toward y = 0
    derivative_rtol: float = 1e-4


@dataclass
class NoiseConfig:
    """Q-Wiener truncation settings"""
    truncation: int = 8
    gram_tolerance: float = 1e-3


@dataclass
class SimulationConfig:
    """Defaults for path simulation"""
    master_seed: int = 20240611
    blowup_norm: float = 1e6
    snapshot_stride: int = 1
    positivity_monitor: bool = True
    node_multiple_tolerance: float = 1e-9


@dataclass
class GirsanovConfig:
    """Measure-change diagnostics"""
    overflow_exponent: float = 700.0


@dataclass
class PerformanceConfig:
    """Performance settings"""
    worker_threads: int = field(
        default_factory=lambda: int(os.getenv('FWDCURVE_THREADS', '4'))
    )

    def __post_init__(self):
        if self.worker_threads < 1:
            raise ValueError(f"worker_threads must be >= 1, got {self.worker_threads}")


@dataclass
class SystemConfig:
    """Main system configuration"""
    grid: GridConfig = field(default_factory=GridConfig)
    lattice: LatticeConfig = field(default_factory=LatticeConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    girsanov: GirsanovConfig = field(default_factory=GirsanovConfig)
    performance: PerformanceConfig = field(default_factory=PerformanceConfig)

    # Logging
    log_level: str = field(default_factory=lambda: os.getenv('LOG_LEVEL', 'INFO'))
    log_file: Optional[str] = field(default_factory=lambda: os.getenv('FWDCURVE_LOG_FILE'))

    def setup_logging(self):
        """Install the root logging handlers once, from the CLI entry point"""
        handlers = [logging.StreamHandler()]
        if self.log_file:
            log_dir = os.path.dirname(self.log_file)
            if log_dir:
                os.makedirs(log_dir, exist_ok=True)
            handlers.append(logging.FileHandler(self.log_file))

        logging.basicConfig(
            level=getattr(logging, self.log_level.upper(), logging.INFO),
            format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            handlers=handlers,
            force=True,
        )


# Global configuration instance
config = SystemConfig()


def load_config_from_env():
    """Load configuration overrides from environment variables"""
    if os.getenv('FWDCURVE_THREADS'):
        threads = int(os.getenv('FWDCURVE_THREADS'))
        if threads < 1:
            raise ValueError(f"FWDCURVE_THREADS must be >= 1, got {threads}")
        config.performance.worker_threads = threads

    if os.getenv('LOG_LEVEL'):
        config.log_level = os.getenv('LOG_LEVEL')
    if os.getenv('FWDCURVE_LOG_FILE'):
        config.log_file = os.getenv('FWDCURVE_LOG_FILE')

    if os.getenv('FWDCURVE_WEIGHT_PARAM'):
        config.grid.weight_param = float(os.getenv('FWDCURVE_WEIGHT_PARAM'))

    return config


def save_config_to_file(filepath: str):
    """Save current configuration to JSON file"""
    import dataclasses

    with open(filepath, 'w', encoding='utf-8') as f:
        json.dump(dataclasses.asdict(config), f, indent=2)
