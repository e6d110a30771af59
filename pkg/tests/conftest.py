import numpy as np
import pytest

from mfsmp.core import ConstantPolicy, TimeGrid
from mfsmp.noise import make_plan

# criterion -> (passed, detail); filled by test_acceptance, printed at the end
ACCEPTANCE = {}


def record(name, passed, detail=""):
    ACCEPTANCE[name] = (bool(passed), detail)
    print(f"{name}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda s: int(s[2:]) if s[2:].isdigit() else 99):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'} {detail}")


@pytest.fixture(scope="session")
def small_grid():
    return TimeGrid(1.0, 16)


@pytest.fixture(scope="session")
def small_plan(small_grid):
    return make_plan(11, 8, 16, small_grid)


@pytest.fixture
def binary():
    return ConstantPolicy(0.0, (0.0, 1.0)), ConstantPolicy(1.0, (0.0, 1.0))


def rng(seed=0):
    return np.random.default_rng(seed)
