import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from advforensics.detectors import COMPACT_CNN, FEATURE_PROBE, build_detector, train_detector
from advforensics.synthdata import CorpusSpec, generate_corpus, split_corpus

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_corpus():
    """320 train / 80 held-out images of the default family."""
    images = generate_corpus(CorpusSpec(n_real=200, n_fake=200, seed=7))
    return split_corpus(images, 0.2, seed=7)


@pytest.fixture(scope="session")
def trained_probe(small_corpus):
    train, _ = small_corpus
    return train_detector(build_detector(FEATURE_PROBE, 0), train, epochs=20, lr=2.0, seed=0)


@pytest.fixture(scope="session")
def trained_cnn(small_corpus):
    train, _ = small_corpus
    return train_detector(build_detector(COMPACT_CNN, 0), train, epochs=10, lr=0.1, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
