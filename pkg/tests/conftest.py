import numpy as np
import pytest

from orthopgd.data import SyntheticSpec, generate
from orthopgd.defenses import DefenseConfig, build_defense, train_classifier
from orthopgd.nn import ClassifierModel


@pytest.fixture(scope="session")
def splits():
    return generate(SyntheticSpec(seed=0))


@pytest.fixture(scope="session")
def classifier(splits):
    train, _ = splits
    return train_classifier(train, DefenseConfig("dla"))


@pytest.fixture(scope="session")
def defenses(splits, classifier):
    """All four desk defenses for data seed 0; dla, sid and spam share ``classifier``."""
    train, _ = splits
    out = {}
    for kind in ("trapdoor", "dla", "sid", "spam"):
        out[kind] = build_defense(train, DefenseConfig(kind), classifier=None if kind == "trapdoor" else classifier)
    return out


@pytest.fixture
def tiny_model():
    return ClassifierModel.init([6, 5, 4, 3], seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(LINES):
            terminalreporter.write_line(LINES[number])
