"""Collects acceptance verdicts and prints them after the run."""

VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in VERDICTS:
        terminalreporter.write_line(line)
