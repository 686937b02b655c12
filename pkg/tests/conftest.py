import pytest

_LINES = []


@pytest.fixture
def report_line():
    """Record a one-line acceptance verdict, echoed in the terminal summary."""
    def emit(name, ok, detail, seconds=None):
        t = f" [{seconds:.2f}s]" if seconds is not None else ""
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}{t}"
        _LINES.append(line)
        print(line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
