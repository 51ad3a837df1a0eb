import sys

import pytest

from eclseq.config import DatasetConfig, EvalConfig, ModelConfig, RunConfig, TrainConfig
from eclseq.synthetic import cyclic_dataset


def small_config(**train):
    """A quick configuration over the 12-slot synthetic set."""
    base = dict(epochs=2, lr=1e-3, batch_size=16, k_window=3, gen_freeze_epoch=10, seed=0)
    base.update(train)
    weights = base.pop("weights", None)
    tc = TrainConfig(**base) if weights is None else TrainConfig(weights=weights, **base)
    return RunConfig(dataset=DatasetConfig(max_len=12), model=ModelConfig(d=16, dropout_rate=0.2),
                     train=tc, eval=EvalConfig(Ks=[1, 10, 20]), output_dir="unused").validate()


@pytest.fixture(scope="session")
def tiny_dataset():
    return cyclic_dataset(n_users=48, n_items=30, n_patterns=5, length=12, seed=1)


@pytest.fixture(scope="session")
def synthetic_dataset():
    return cyclic_dataset()


@pytest.fixture
def make_config():
    return small_config


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
