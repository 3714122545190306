import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fedpc.algorithms import RunConfig  # noqa: E402
from fedpc.data import FederationConfig, generate_federation  # noqa: E402
from fedpc.numerics import LearningSchedule, LossConfig, ModelSpec  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_fed_cfg():
    return FederationConfig(
        num_vehicles=2, drivers_per_vehicle=3, classes=3, feature_dim=6,
        samples_per_client_per_class=20, seed=7,
    )


@pytest.fixture(scope="session")
def small_fed(small_fed_cfg):
    return generate_federation(small_fed_cfg)


def small_run_config(fed_cfg, algorithm="fedpc", **kw):
    base = dict(
        algorithm=algorithm,
        rounds=2,
        local_epochs=2,
        batch_size=16,
        loss=LossConfig(1.0, 1e-5),
        lr=LearningSchedule(1e-3, 0.5),
        model=ModelSpec((fed_cfg.feature_dim, 8, 8, fed_cfg.classes), 1),
        federation=fed_cfg,
        seed=3,
        personalization_steps=3,
    )
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture
def small_cfg(small_fed_cfg):
    return small_run_config(small_fed_cfg)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
