import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        detail = dict(item.user_properties).get("detail", "")
        _RESULTS[n] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, status, detail = _RESULTS[n]
        line = f"criterion {n:2d} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
