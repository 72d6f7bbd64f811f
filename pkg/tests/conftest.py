import numpy as np
import pytest

from stgamm import SmoothConfig, SyntheticConfig, fit_gamm, synthesize_plots

SMALL = SyntheticConfig(n_side=8, n_years=6, sigma=0.12)
SMALL_SMOOTH = SmoothConfig(k_space=10, k_time=4, k_age=4)


@pytest.fixture(scope="session")
def small_data():
    return synthesize_plots(SMALL, seed=11)


@pytest.fixture(scope="session")
def small_model(small_data):
    return fit_gamm(small_data.table, SMALL_SMOOTH)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def accept():
    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        print(line)
        assert passed, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
