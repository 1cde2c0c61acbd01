import time
from contextlib import contextmanager

import pytest

_outcomes: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Context manager that records a PASS/FAIL line for an acceptance criterion."""

    @contextmanager
    def record(number: int, title: str):
        t0 = time.perf_counter()
        try:
            yield
        except BaseException as exc:
            line = f"criterion {number}: FAIL  {title} ({type(exc).__name__})"
            _outcomes[number] = line
            print(line)
            raise
        line = f"criterion {number}: PASS  {title} [{time.perf_counter() - t0:.2f}s]"
        _outcomes[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        terminalreporter.write_line(_outcomes[number])
