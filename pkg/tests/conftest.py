"""Shared fixtures plus the acceptance summary lines.

Acceptance tests append one line per criterion to ACCEPTANCE_LINES; the
terminal-summary hook prints them after the run so the pass/fail verdicts
survive pytest's output capture.
"""

import sys

sys.path.insert(0, __file__.rsplit("/", 1)[0])

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
