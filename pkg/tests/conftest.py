"""Shared fixtures: a small dataset and a quickly trained model.

Session-scoped so the training cost is paid once for the whole unit
suite.  The acceptance suite builds its own (larger) setup and caches it
on disk; see test_acceptance.py.
"""

import sys

import numpy as np
import pytest

from ilpdlab import data, network


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "criterion_lines", None) if mod else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_dataset():
    return data.generate_synthetic(7, 200)


@pytest.fixture(scope="session")
def tiny_model(tiny_dataset):
    spec = network.smallnet()
    params = network.train_sgd(
        spec, network.init_params(spec, 1), tiny_dataset.slice(0, 140),
        epochs=8, lr=0.1, batch_size=32, seed=1,
    )
    return network.Model(spec, params)


@pytest.fixture(scope="session")
def tiny_model_b(tiny_dataset):
    spec = network.smallnet()
    params = network.train_sgd(
        spec, network.init_params(spec, 2), tiny_dataset.slice(0, 140),
        epochs=8, lr=0.1, batch_size=32, seed=2,
    )
    return network.Model(spec, params)


@pytest.fixture(scope="session")
def tiny_batch(tiny_dataset):
    return tiny_dataset.images[140:156], tiny_dataset.labels[140:156]
