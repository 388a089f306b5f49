import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mixedray.geometry import BallShellChart, ConformalChart, EuclideanChart

settings.register_profile("repo", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

# acceptance lines collected during the run, printed in the terminal summary
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture(scope="session")
def flat():
    return EuclideanChart([0.0, 0.0, 0.0], [1.0, 1.0, 1.0])


@pytest.fixture(scope="session")
def shell_in():
    """x = 1 - r on the shell 0.7 <= r <= 1."""
    return BallShellChart(3, radius=1.0, width=0.3, half_angle=0.6, orientation="inward")


@pytest.fixture(scope="session")
def shell_out():
    """x = r - 0.7 on the same shell; the working chart of the inversion."""
    return BallShellChart(3, radius=1.0, width=0.3, half_angle=0.6, orientation="outward")


@pytest.fixture(scope="session")
def conformal():
    Q = [[0.3, 0.1, 0.0], [0.1, -0.2, 0.05], [0.0, 0.05, 0.1]]
    return ConformalChart([0.0, -1.0, -1.0], [1.0, 1.0, 1.0], a=[0.4, 0.2, -0.3], Q=Q)


@pytest.fixture
def record_criterion(capsys):
    """Record and print one acceptance line."""
    def record(k: int, ok: bool, detail: str):
        ACCEPTANCE[k] = (bool(ok), detail)
        with capsys.disabled():
            print(f"\ncriterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    return record
