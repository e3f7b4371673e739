import pytest

from fde_lab.domain import build_grid
from fde_lab.steady import solve_steady


@pytest.fixture(scope="session")
def grid_101():
    return build_grid(1, [(0.0, 1.0)], 101)


@pytest.fixture(scope="session")
def steady_101(grid_101):
    return solve_steady(2.0, 0.0, grid_101)


@pytest.fixture(scope="session")
def grid_401():
    return build_grid(1, [(0.0, 1.0)], 401)


@pytest.fixture(scope="session")
def steady_401(grid_401):
    return solve_steady(2.0, 0.0, grid_401)


@pytest.fixture(scope="session")
def grid_2d():
    return build_grid(2, [(0.0, 1.0), (0.0, 1.0)], 21)


@pytest.fixture(scope="session")
def steady_2d(grid_2d):
    return solve_steady(2.0, 0.0, grid_2d, tol=1e-8)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record_criterion():
    """Record one acceptance line; returns the pass flag so tests can assert on it."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
