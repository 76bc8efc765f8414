import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not report.failed:
        return
    number, title = marker.args
    detail = getattr(item, "criterion_detail", "")
    passed = report.passed and _RESULTS.get(number, (True,))[0]
    _RESULTS[number] = (passed, title, detail, f"{report.duration:.1f}s")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        passed, title, detail, duration = _RESULTS[number]
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title} ({duration})"
        terminalreporter.write_line(line + (f": {detail}" if detail else ""))
