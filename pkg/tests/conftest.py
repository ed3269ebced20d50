"""Prints the acceptance verdicts collected during the session as one block."""

VERDICTS: dict[int, str] = {}
NOTES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS and not NOTES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[number])
    for note in NOTES:
        terminalreporter.write_line(f"note: {note}")
