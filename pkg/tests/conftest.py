"""Collects acceptance-criterion lines and repeats them in the terminal summary."""

CRITERIA: dict[int, str] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> str:
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    CRITERIA[number] = line
    return line


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
