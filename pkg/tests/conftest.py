"""Shared fixtures; collects one summary line per acceptance criterion."""

from __future__ import annotations

import pytest

ACCEPTANCE_COUNT = 10
_RESULTS: dict[int, tuple[str, str]] = {}


class AcceptanceRecorder:
    def record(self, n: int, passed: bool, detail: str) -> bool:
        _RESULTS[n] = ("PASS" if passed else "FAIL", detail)
        return passed

    def skip(self, n: int, reason: str):
        _RESULTS[n] = ("SKIP", reason)
        pytest.skip(reason)


@pytest.fixture
def acceptance() -> AcceptanceRecorder:
    return AcceptanceRecorder()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_COUNT + 1):
        status, detail = _RESULTS.get(n, ("NOT RUN", "criterion was not executed in this session"))
        terminalreporter.write_line(f"ACCEPTANCE {n}: {status} — {detail}")
