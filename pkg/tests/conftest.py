import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record_criterion():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(criterion: str, passed: bool, detail: str) -> None:
        line = f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
