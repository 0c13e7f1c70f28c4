ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    # repeat the acceptance lines at the end, where captured output would hide them
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
