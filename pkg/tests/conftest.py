import os

import pytest

# keep the y_max cache inside the test session
os.environ.setdefault("EVOGRAD_CACHE_DIR", os.path.join(os.path.dirname(__file__), ".cache"))

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def rng():
    from evograd.numerics import make_rng

    return make_rng(1234)


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion; returns the verdict."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        _CRITERIA[number] = f"{line}  [{detail}]" if detail else line
        print(_CRITERIA[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
