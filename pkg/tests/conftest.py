import pytest

_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one acceptance line; printed in the terminal summary."""

    def add(criterion: str, ok: bool, detail: str = "") -> None:
        _LINES.append(f"{'PASS' if ok else 'FAIL'}  {criterion}" + (f"  ({detail})" if detail else ""))

    return add


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in _LINES:
        terminalreporter.write_line(line)
