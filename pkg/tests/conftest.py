import pytest

# filled by test_acceptance.py, one (criterion, passed, detail) per acceptance criterion
ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def acceptance():
    def record(criterion: str, passed: bool, detail: str) -> None:
        ACCEPTANCE.append((criterion, passed, detail))
        print(f"{'PASS' if passed else 'FAIL'} {criterion}: {detail}")
        assert passed, f"{criterion}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {criterion}: {detail}")
