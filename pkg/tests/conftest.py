import pytest

_LINES: list[str] = []


@pytest.fixture(scope="session")
def report():
    """Record one PASS/FAIL line for an acceptance criterion and return the verdict."""
    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number}: {title} | {detail}"
        _LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
