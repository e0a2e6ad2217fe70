import numpy as np
import pytest
from hypothesis import settings

from chatboost.design_matrix import Column, DesignMatrix
from chatboost.experiment import CELL_TABLE

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def cell_table_group_matrix(scale: float) -> DesignMatrix:
    """Row-level 'group' column with reference pair counts and subscriber shares."""
    groups, target = [], []
    for u, c, _, _, pairs, _, _, rate in CELL_TABLE:
        n = int(round(pairs * scale))
        k = int(round(rate * n))
        groups += [f"u_{u}-c_{c}"] * n
        target += [1] * k + [0] * (n - k)
    return DesignMatrix((Column.categorical("group", groups),), np.asarray(target))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
