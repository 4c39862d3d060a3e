import pytest

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion and print it."""
    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        _CRITERIA[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
