import numpy as np
import pytest

from gaitdeid.models import ModelConfig, cached_models
from gaitdeid.silhouette import WalkerIdentity, make_corpus, synth_walker


@pytest.fixture(scope="session")
def models():
    return cached_models(ModelConfig())


@pytest.fixture(scope="session")
def corpus():
    return make_corpus(10, 6, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def walker():
    return WalkerIdentity(0.22, 0.26, 0.36, 0.125, 0.3, 0.25)


@pytest.fixture
def walker_seq(walker):
    return synth_walker(walker, 8, seed=5, identity="w")


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
