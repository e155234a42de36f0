import sys

import numpy as np
import pytest

from dlrecon.linops import svd
from dlrecon.projector import ScanGeometry, build_system_matrix


@pytest.fixture(scope="session")
def small_geometry():
    # 30 one-degree views: the operator is rank deficient at side 16
    return ScanGeometry.limited_view(30, 16)


@pytest.fixture(scope="session")
def small_H(small_geometry):
    return build_system_matrix(small_geometry, 16).normalized()


@pytest.fixture(scope="session")
def small_factors(small_H):
    return svd(small_H)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
