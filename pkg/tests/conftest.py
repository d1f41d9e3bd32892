import pytest

_CRITERIA = []


@pytest.fixture
def report_criterion():
    """Record one PASS/FAIL (or SKIP) line; all lines are repeated in the terminal summary."""
    def report(number, title, passed, detail):
        line = "%s criterion %s %s: %s" % ({True: "PASS", False: "FAIL", None: "SKIP"}[passed], number, title, detail)
        _CRITERIA.append(line)
        print(line)
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
