import pytest

_CRITERIA: dict[str, str] = {}


@pytest.fixture(scope="session")
def criterion_log():
    """Record ``(criterion, passed, detail)``; printed as one line each at the end of the run."""

    def record(name: str, passed: bool, detail: str = ""):
        line = f"{name} {'PASS' if passed else 'FAIL'} {detail}".rstrip()
        _CRITERIA[name] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n[1:]) if n[1:].isdigit() else 99):
        terminalreporter.write_line(_CRITERIA[name])
