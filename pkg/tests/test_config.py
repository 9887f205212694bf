import dataclasses
import json

import pytest

from config.config import (
    GridConfig,
    PerformanceConfig,
    SystemConfig,
    config,
    load_config_from_env,
    save_config_to_file,
)


def test_defaults():
    system = SystemConfig()
    assert system.grid.weight_param == 1.0
    assert system.grid.n_nodes == 1401
    assert system.noise.truncation == 8
    assert system.girsanov.overflow_exponent == 700.0
    assert system.lattice.derivative_cap == 1e12


def test_section_validation():
    with pytest.raises(ValueError):
        GridConfig(weight_param=0.0)
    with pytest.raises(ValueError):
        GridConfig(n_nodes=2)
    with pytest.raises(ValueError):
        PerformanceConfig(worker_threads=0)


def test_env_overrides(monkeypatch):
    monkeypatch.setattr(config.performance, 'worker_threads', config.performance.worker_threads)
    monkeypatch.setattr(config.grid, 'weight_param', config.grid.weight_param)
    monkeypatch.setattr(config, 'log_level', config.log_level)
    monkeypatch.setenv('FWDCURVE_THREADS', '7')
    monkeypatch.setenv('FWDCURVE_WEIGHT_PARAM', '0.5')
    monkeypatch.setenv('LOG_LEVEL', 'DEBUG')
    load_config_from_env()
    assert config.performance.worker_threads == 7
    assert config.grid.weight_param == 0.5
    assert config.log_level == 'DEBUG'

    monkeypatch.setenv('FWDCURVE_THREADS', '0')
    with pytest.raises(ValueError):
        load_config_from_env()


def test_save_writes_the_current_tree(tmp_path, monkeypatch):
    monkeypatch.setattr(config.simulation, 'master_seed', 99)
    path = tmp_path / 'system.json'
    save_config_to_file(str(path))
    saved = json.loads(path.read_text())
    assert saved['simulation']['master_seed'] == 99
    assert saved['grid'] == dataclasses.asdict(config.grid)
    assert saved['lattice'] == dataclasses.asdict(config.lattice)
    assert saved['girsanov']['overflow_exponent'] == 700.0
