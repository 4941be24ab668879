import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from depthvid.model import UNetConfig, VideoDiffusionModel

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    # width-8 net used for gradient checks
    return UNetConfig(base_width=8, channel_mults=(1, 2), d_k=4, norm_groups=4, time_dim=8)


@pytest.fixture(scope="session")
def default_model():
    return VideoDiffusionModel()


def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
