import re

import numpy as np
import pytest

from levy_mixing_lab.sde_core import ModelConfig
from levy_mixing_lab.stable_noise import StableSpec

ACCEPTANCE_LINES = {}


def record_criterion(number, ok, detail):
    """Store one verdict line for the acceptance summary and echo it."""
    line = f"criterion {number:>4}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[str(number)] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")

    def key(k):
        m = re.match(r"(\d+)(.*)", k)
        return int(m.group(1)), m.group(2)

    for k in sorted(ACCEPTANCE_LINES, key=key):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def preset():
    return ModelConfig()


@pytest.fixture
def cauchy():
    return StableSpec(1.0, 1.0, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
