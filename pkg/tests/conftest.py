import numpy as np
import pytest

from smamba.tensor import Tensor


def leaf(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record(capsys):
    """Print one PASS/FAIL line for an acceptance criterion, live and in the final summary."""

    def _record(number, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title} | {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
