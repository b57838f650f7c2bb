import pytest

# one summary line per acceptance criterion, filled in by tests/test_acceptance.py
CRITERIA = {}


@pytest.fixture
def criterion():
    def record(number, ok, detail):
        CRITERIA[number] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
