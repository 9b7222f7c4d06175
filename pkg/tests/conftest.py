from __future__ import annotations

import numpy as np
import pytest

from structflow.sphere_grid import build_gnomonic_patch

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict = {}


def record(criterion, passed, detail):
    ACCEPTANCE_RESULTS[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def grid16():
    return build_gnomonic_patch(70.0, 16, 16)


@pytest.fixture(scope="session")
def grid_rect():
    return build_gnomonic_patch(80.0, 12, 20)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_unit(rng, n=None):
    v = rng.normal(size=(3,) if n is None else (n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)
