from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


class CriterionRecorder:
    """Collects one pass/fail line per acceptance criterion for the summary."""

    def record(self, name: str, passed: bool, detail: str = "") -> None:
        _ACCEPTANCE_RESULTS.append((name, passed, detail))

    def check(self, name: str, passed: bool, detail: str = "") -> None:
        self.record(name, bool(passed), detail)
        assert passed, f"{name}: {detail}"


@pytest.fixture()
def criterion() -> CriterionRecorder:
    return CriterionRecorder()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, passed, detail in _ACCEPTANCE_RESULTS:
        flag = "PASS" if passed else "FAIL"
        line = f"[{flag}] {name}"
        if detail:
            line += f" -- {detail}"
        terminalreporter.write_line(line)
