import sys

import numpy as np
import pytest

from zoneforge.phantom import PhantomConfig, generate_case


@pytest.fixture(scope="session")
def small_cfg():
    return PhantomConfig(dims=(32, 32, 5), pg_semi_axes_mm=(10.0, 7.0, 1.8), center_jitter_mm=(1.0, 1.0, 0.0))


@pytest.fixture(scope="session")
def small_case(small_cfg):
    return generate_case(small_cfg, 3)


@pytest.fixture(scope="session")
def phantom64():
    return generate_case(PhantomConfig(), 11)


@pytest.fixture
def rs():
    return np.random.default_rng(1234)



def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
