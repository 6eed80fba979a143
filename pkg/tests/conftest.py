import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from textmatch import matcher
from textmatch.datagen import DatasetSpec, build_dataset

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

DIGITS = "0123456789*"

# filled by the acceptance tests, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def toy_config(**kw) -> matcher.ModelConfig:
    base = dict(alphabet=DIGITS, s_t=6, s_i=8, d_i=16, d_t=16, d_att=8, channels=(4, 4, 6), image_w=32)
    base.update(kw)
    return matcher.ModelConfig(**base)


@pytest.fixture
def toy_params():
    return matcher.init_params(toy_config(), seed=3)


@pytest.fixture(scope="session")
def small_manifest():
    return build_dataset(DatasetSpec("synthetic", 20, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
