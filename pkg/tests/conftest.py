from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from disc.domains import DatasetSpec, build_sequence
from disc.harness import InitialModel, prepare_initial
from disc.tensor_nn import ConvBlock, ModelConfig, build_model
from disc.trainer import TrainConfig

TINY_SPEC = DatasetSpec(n_classes=4, height=16, width=16, n_train=96, n_val=32, n_test=48, seed=0)
TINY_MODEL = ModelConfig(height=16, width=16, blocks=(ConvBlock(4), ConvBlock(6)), n_classes=4, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_sequence():
    return build_sequence(TINY_SPEC)


@pytest.fixture(scope="session")
def tiny_initial(tiny_sequence):
    return prepare_initial(tiny_sequence, build_model(TINY_MODEL), TrainConfig(max_epochs=4, patience=1, max_lr_drops=1))


@pytest.fixture
def fresh_tiny_initial(tiny_initial):
    return InitialModel(tiny_initial.model.copy(), tiny_initial.log)


# Desk-scale fixtures: default dataset, default model, full offline protocol.
# Built once per session; the acceptance suite and a few slow tests share them.


@pytest.fixture(scope="session")
def desk_sequence():
    return build_sequence(DatasetSpec())


@pytest.fixture(scope="session")
def desk_initial(desk_sequence):
    return prepare_initial(desk_sequence, build_model(ModelConfig()), TrainConfig())


@pytest.fixture(scope="session")
def desk_probe(desk_sequence):
    return desk_sequence[0].test.images[:64]


# Acceptance criteria report: one PASS/FAIL line per criterion, printed at the
# end of the session so it lands in the terminal log even with output capture.

_CRITERIA: dict[str, str] = {}


class _Criterion:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        _CRITERIA[self.name] = "FAIL"
        return self

    def __exit__(self, exc_type, exc, tb):
        _CRITERIA[self.name] = "FAIL" if exc_type else "PASS"
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in _CRITERIA.items():
        terminalreporter.write_line(f"{status}  {name}")
