import numpy as np
import pytest

from mtmetric.data_model import Dataset, TaskSchema, prepare
from mtmetric.synthgen import SynthConfig, generate_with_truth


TINY = (
    TaskSchema("auto", "automated", 0.1),
    TaskSchema("score", "expert", 0.1),
    TaskSchema("score_fwd", "gradient_forward", 0.01, source_task=1),
    TaskSchema("score_bwd", "gradient_backward", 0.01, source_task=1),
)


@pytest.fixture
def tiny_schema():
    return TINY


def make_dataset(ids, days, features, labels, schema):
    return Dataset(np.array(ids), np.array(days), np.asarray(features, float),
                   np.asarray(labels, float), schema)


@pytest.fixture(scope="session")
def small_synth():
    """Prepared zero-noise synthetic dataset with ground truth."""
    ds, truth = generate_with_truth(SynthConfig(individuals=12, steps=10, seed=3,
                                                gradients_in_match=False))
    return prepare(ds), truth


def criterion_config(seed):
    """Training setup used for the end-to-end learning-signal checks."""
    from mtmetric.metric import LossConfig
    from mtmetric.miner import MinerConfig
    from mtmetric.trainer import TrainConfig

    return TrainConfig(epochs=30, lr=0.05, l=4, seed=seed,
                       loss=LossConfig(lambda_mse=1.0), miner=MinerConfig(n=3))


def criterion_data(seed):
    ds, truth = generate_with_truth(SynthConfig(seed=seed, gradients_in_match=False))
    return prepare(ds), truth


@pytest.fixture(scope="session")
def trained_seed0():
    from mtmetric.trainer import train

    ds, truth = criterion_data(0)
    return ds, truth, train(ds, criterion_config(0))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
