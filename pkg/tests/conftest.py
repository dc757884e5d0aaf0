import pytest

# criterion number -> (title, passed) filled in by test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[str, bool]] = {}


@pytest.hookimpl(trylast=True)
def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        title, ok = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}")
