"""Shared fixtures: the frozen desk benchmark panel and small model builders.

Desk-scale experiment results are expensive (tens of seconds each), so they
are computed lazily, once per test session, and shared by every test that
needs a trained federation.
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np
import pytest

from fedskel.config import config_from_dict, load_config
from fedskel.federation import run_experiment

REPO_ROOT = Path(__file__).resolve().parent.parent
DESK_CONFIG_PATH = REPO_ROOT / "configs" / "desk.toml"

# Variants of the frozen desk suite used by the comparative criteria.
DESK_VARIANTS = {
    "fedavg": {"federation": {"strategy": "fedavg"}, "eval": {"unseen": True}},
    "fsar": {"federation": {"strategy": "fsar"}, "eval": {"unseen": True}},
    "grain0": {"federation": {"strategy": "fsar"}, "loss": {"grain_count": 0}},
    "grain1": {"federation": {"strategy": "fsar"}, "loss": {"grain_count": 1}},
    "fixed111": {
        "federation": {"strategy": "fsar"},
        "model": {"coeff_mode": "fixed", "coeff_init": [1.0, 1.0, 1.0]},
    },
    "fixed100": {
        "federation": {"strategy": "fsar"},
        "model": {"coeff_mode": "fixed", "coeff_init": [1.0, 0.0, 0.0]},
    },
}


def desk_config_dict(**section_overrides) -> dict:
    """The shipped desk config as a plain dict, with per-section overrides."""
    payload = load_config(DESK_CONFIG_PATH).to_dict()
    for section, values in section_overrides.items():
        if isinstance(values, dict):
            payload.setdefault(section, {}).update(values)
        else:
            payload[section] = values
    return payload


def eval_means(result) -> np.ndarray:
    """Mean-over-clients linear accuracy at every evaluation round."""
    evals = [r.client_accuracy for r in result.reports if r.client_accuracy]
    return np.array([sum(a.values()) / len(a) for a in evals])


def tail_std(result) -> float:
    """Rolling std of the mean accuracy over the last 50% of eval points."""
    means = eval_means(result)
    return float(means[len(means) // 2 :].std())


class DeskPanel:
    """Lazy, memoized runner for the desk benchmark variants."""

    def __init__(self):
        self._results = {}
        self.wall_times = {}
        self.seed = int(desk_config_dict()["seed"])

    def run(self, name: str):
        if name not in self._results:
            cfg = config_from_dict(desk_config_dict(**DESK_VARIANTS[name]))
            started = time.perf_counter()
            self._results[name] = run_experiment(cfg)
            self.wall_times[name] = time.perf_counter() - started
        return self._results[name]

    def final_mean(self, name: str) -> float:
        return float(eval_means(self.run(name))[-1])

    def tail_std(self, name: str) -> float:
        return tail_std(self.run(name))

    def total_wall_time(self) -> float:
        return sum(self.wall_times.values())


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "desk: trains the desk-scale benchmark panel (minutes, memoized)"
    )


def pytest_collection_modifyitems(config, items):
    for item in items:
        if "desk_panel" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.desk)


@pytest.fixture(scope="session")
def desk_panel() -> DeskPanel:
    return DeskPanel()
