import pytest

# criterion number -> (passed, detail), filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def criterion():
    """``with criterion(n) as info:`` records pass/fail; set ``info['detail']`` for the report."""
    from contextlib import contextmanager

    @contextmanager
    def record(n):
        info = {"detail": ""}
        try:
            yield info
        except BaseException:
            ACCEPTANCE[n] = (False, info["detail"])
            raise
        ACCEPTANCE[n] = (True, info["detail"])

    return record
