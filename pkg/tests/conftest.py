"""Collects one pass/fail line per acceptance criterion for the terminal summary."""
import pytest

_LINES = {}


@pytest.fixture
def detail(request):
    """Attach a short measurement string to the criterion line of this test."""
    def add(text):
        request.node.user_properties.append(("detail", str(text)))
    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, name = mark.args
    notes = "; ".join(v for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else "FAIL"
    _LINES[number] = f"criterion {number:>2} {status}: {name}" + (f" [{notes}]" if notes else "")


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_LINES):
            terminalreporter.write_line(_LINES[n])
