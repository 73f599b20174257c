import pytest

# criterion number -> summary line, filled by the acceptance tests
VERDICTS: dict[int, str] = {}


def record(number: int, title: str, passed: bool, detail: str) -> bool:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    VERDICTS[number] = line
    print(line)
    return passed


@pytest.fixture
def verdict():
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n])
