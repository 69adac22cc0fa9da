import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pssclf.config import ExperimentConfig, build_setup

settings.register_profile("pssclf", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pssclf")


@pytest.fixture(scope="session")
def setup():
    """Default pendulum setup: 30% perturbation, seed 0."""
    return build_setup(ExperimentConfig())


@pytest.fixture(scope="session")
def exact_setup():
    """True system equal to the model."""
    return build_setup(ExperimentConfig(perturbation=0.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
