import pytest

_RESULTS: list[tuple[str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    detail = dict(report.user_properties).get("detail", "")
    status = dict(report.user_properties).get("status")
    if status is None:
        status = "PASS" if report.passed else "FAIL"
    _RESULTS.append((status, marker.args[0], detail))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for status, name, detail in _RESULTS:
        terminalreporter.write_line(f"{status:<6} {name}" + (f"  [{detail}]" if detail else ""))
