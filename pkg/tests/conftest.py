import pytest

# criterion id -> (passed, detail); filled by test_acceptance
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k[1:])):
        ok, detail = ACCEPTANCE_LINES[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def record():
    def _record(key, ok, detail):
        ACCEPTANCE_LINES[key] = (bool(ok), detail)
        print(f"{key} {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return _record
