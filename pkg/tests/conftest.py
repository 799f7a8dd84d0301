import pytest

ACCEPTANCE = {}


@pytest.fixture
def record():
    """Store one acceptance verdict: record(n, passed, detail)."""
    def _record(n, passed, detail):
        ACCEPTANCE[n] = (bool(passed), detail)
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
