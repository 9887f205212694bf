#!/usr/bin/env python3
"""
Quick start script for the forward-curve toolkit
Runs the shipped presets through the CLI with a small number of paths
"""

import os
import sys

# Add the project root to Python path
project_root = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, project_root)

from backend.app import main

PRESETS = os.path.join(project_root, 'config', 'presets')

RUNS = [
    ('simulate', 'zero_transport.json', []),
    ('check', 'cev_gamma2.json', []),
    ('simulate', 'cev_gamma2.json', ['--paths', '50']),
    ('compare', 'geometric_projection.json', ['--paths', '100']),
    ('compare', 'exp_model_deterministic.json', ['--paths', '20']),
    ('simulate', 'girsanov_drift.json', ['--paths', '50']),
]

if __name__ == "__main__":
    print("Running forward-curve presets...")
    print("")

    failures = 0
    for command, preset, extra in RUNS:
        name = os.path.splitext(preset)[0]
        out = os.path.join(project_root, 'output', 'quick_start', f"{command}_{name}")
        code = main([command, '--config', os.path.join(PRESETS, preset), '--out', out] + extra)
        status = 'ok' if code == 0 else f'exit {code}'
        print(f"{command:9s} {name:28s} {status:8s} -> {out}")
        failures += code != 0

    print("")
    print(f"{len(RUNS) - failures}/{len(RUNS)} runs succeeded")
    sys.exit(1 if failures else 0)
