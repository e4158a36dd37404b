"""Shared fixtures; collects one pass/fail line per acceptance criterion."""

from __future__ import annotations

import pytest

_LINES: dict[int, str] = {}


class AcceptanceLog:
    def record(self, number: int, passed: bool | None, detail: str) -> None:
        """``passed=None`` marks an informative (non-gating) criterion."""
        status = "INFO" if passed is None else ("PASS" if passed else "FAIL")
        _LINES[number] = f"criterion {number:>2}: {status}  {detail}"


@pytest.fixture(scope="session")
def acceptance() -> AcceptanceLog:
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_LINES):
        terminalreporter.write_line(_LINES[number])
