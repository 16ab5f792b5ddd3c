"""Shared pytest wiring: the acceptance suite registers one PASS/FAIL line per
criterion here so they are echoed at the end of every run, regardless of
capture settings."""

acceptance_lines: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if acceptance_lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)
