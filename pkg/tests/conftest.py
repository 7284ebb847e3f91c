import pytest

_LINES = []


@pytest.fixture
def report():
    """Record a one-line pass/fail verdict that is echoed in the terminal summary."""

    def _report(criterion, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
        _LINES.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
