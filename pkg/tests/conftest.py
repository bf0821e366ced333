import pytest

_lines: list[str] = []


@pytest.fixture
def criterion(capsys):
    """Record one acceptance line; it is printed immediately and repeated in the terminal summary."""

    def record(number, title, passed, detail="", informational=False):
        tag = "INFO" if informational else ("PASS" if passed else "FAIL")
        line = f"criterion {number:>4} [{tag}] {title}: {detail}"
        _lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _lines:
        terminalreporter.section("acceptance criteria")
        for line in _lines:
            terminalreporter.write_line(line)
