"""Shared pytest hooks: acceptance verdict lines are echoed in the terminal summary."""

ACCEPTANCE_LINES = []


def record_verdict(line):
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
