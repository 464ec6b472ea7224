import sys

import numpy as np
import pytest

from fedmtl.data import DataConfig, SyntheticSpec, generate_synthetic
from fedmtl.model import ModelConfig
from fedmtl.nn import LayerSpec
from fedmtl.pipeline import ExperimentSpec, StagePlanConfig, TrainingConfig


def tiny_config(**kw) -> ModelConfig:
    base = dict(
        heads={"activity": 3, "position": 2},
        conv_layers=[LayerSpec("conv1d", out_channels=3, kernel_size=2)] * 2,
        lstm_layers=[LayerSpec("lstm", hidden_size=4)] * 2,
        window_length=8,
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_cfg() -> ModelConfig:
    return tiny_config()


@pytest.fixture(scope="session")
def small_clients():
    """4 heterogeneous clients, short windows; client3 is the only position client."""
    spec = SyntheticSpec(num_clients=4, activity_classes=3, position_classes=3, position_clients=1,
                         samples_per_class=10, noise=0.3, skew="disjoint")
    return {c.client_id: c for c in generate_synthetic(spec, DataConfig(window_length=12, stride=6), 3)}


@pytest.fixture
def small_spec(small_clients):
    mc = ModelConfig(
        heads={"activity": 3, "position": 3},
        conv_layers=[LayerSpec("conv1d", out_channels=4, kernel_size=3)] * 4,
        lstm_layers=[LayerSpec("lstm", hidden_size=6)] * 2,
        window_length=12,
    )
    return ExperimentSpec(
        mc, small_clients,
        training=TrainingConfig(lr=0.1, batch_size=8, local_epochs=1, rounds=2, epochs=2),
        stages=StagePlanConfig(pretrain_epochs=2, common_rounds=2, task_rounds=2, personalize_epochs=2),
        seed=11,
    )


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
