"""Shared pytest plumbing.

Acceptance tests record one verdict line each; the terminal-summary hook
replays them after the run so they are visible regardless of capture mode.
"""

acceptance_verdicts = []


def pytest_terminal_summary(terminalreporter):
    if acceptance_verdicts:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_verdicts:
            terminalreporter.write_line(line)
