"""Shared pytest plumbing: the acceptance-criteria summary.

Each acceptance test registers exactly one pass/fail line through the
``acceptance`` fixture; the lines are printed as a terminal section at the
end of the run so the verdicts survive output capture.
"""

import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance():
    def _report(num: int, name: str, ok: bool, detail: str) -> None:
        verdict = "PASS" if ok else "FAIL"
        line = f"criterion {num} ({name}): {verdict} -- {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return _report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
