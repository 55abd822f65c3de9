"""Pytest wiring: the acceptance summary block.

Acceptance tests record one line each through ``record_acceptance``; the
terminal-summary hook replays them after the run so the verdicts are visible
without -s even when every test passes.
"""

ACCEPTANCE_LINES = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
