import pytest

VERDICTS = {}


@pytest.fixture
def verdict():
    """Record one acceptance line; the summary hook prints them in order."""
    def record(k, ok, detail):
        VERDICTS[k] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(VERDICTS):
        ok, detail = VERDICTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
