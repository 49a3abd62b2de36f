"""Shared pytest wiring.

The acceptance module records one verdict line per shipped guarantee.
Echoing them from the terminal-summary hook keeps the lines visible in
plain `pytest -v` output, where per-test capture would swallow them.
"""

acceptance_lines = []


def pytest_terminal_summary(terminalreporter):
    if not acceptance_lines:
        return
    terminalreporter.section("acceptance")
    for line in acceptance_lines:
        terminalreporter.write_line(line)
