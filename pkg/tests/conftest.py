"""Shared fixtures. The default training run is expensive on one core, so it
is session-scoped and reused by every test that needs a converged model."""

import numpy as np
import pytest

from tilewise.trainer import MlpModel, SyntheticDataset, evaluate, train


@pytest.fixture(scope="session")
def default_data():
    return SyntheticDataset.generate()


@pytest.fixture(scope="session")
def default_run(default_data):
    """(trained model, loss curve, test accuracy) for the default config."""
    model, losses = train(MlpModel.init(), default_data)
    acc = evaluate(model, default_data)
    return model, losses, acc


@pytest.fixture()
def small_data():
    return SyntheticDataset.generate(seed=11, n_train=512, n_test=256, dim=16)


def small_model(seed=11):
    return MlpModel.init(sizes=(16, 32, 32, 8), seed=seed)


def copy_model(model):
    return MlpModel(
        [w.copy() for w in model.weights], [b.copy() for b in model.biases]
    )
