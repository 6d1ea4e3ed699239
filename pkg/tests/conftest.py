"""Shared fixtures and the acceptance-criterion report hook."""

from __future__ import annotations

import numpy as np
import pytest

_CRITERION_LINES: list[tuple[int, str]] = []


class CriterionReport:
    """Collects one pass/fail line per acceptance criterion."""

    def record(self, number: int, name: str, ok: bool, detail: str) -> None:
        verdict = "PASS" if ok else "FAIL"
        _CRITERION_LINES.append((number, f"criterion {number} ({name}): {verdict} -- {detail}"))


@pytest.fixture(scope="session")
def criterion_report() -> CriterionReport:
    return CriterionReport()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERION_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_CRITERION_LINES):
        terminalreporter.write_line(line)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
