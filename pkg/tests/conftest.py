import numpy as np
import pytest

from grokking_lab.core.config import settings
from grokking_lab.schemas.schemas import ModelConfig, TaskSpec


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def isolated_outputs(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.setattr(settings, "OUTPUT_ROOT", str(tmp_path / "runs"))


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))


@pytest.fixture
def tiny_task():
    return TaskSpec(modulus=7)


@pytest.fixture
def tiny_model(tiny_task):
    """float64 model small enough for finite differences"""
    return ModelConfig.for_task(tiny_task, d_model=8, d_head=4, n_heads=2, d_mlp=16, seed=3, dtype="float64")


@pytest.fixture
def small_task():
    return TaskSpec(modulus=11)


@pytest.fixture
def small_model(small_task):
    return ModelConfig.for_task(small_task, d_model=32, d_head=8, n_heads=4, d_mlp=64, seed=0)
