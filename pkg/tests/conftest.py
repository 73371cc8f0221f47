import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("ccmpc", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ccmpc")

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "passed": [], "failed": [], "notes": []})
    (entry["passed"] if rep.passed else entry["failed"]).append(item.name)
    entry["notes"] += [f"{k}={v}" for k, v in item.user_properties if rep.when == "call"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        verdict = "FAIL" if e["failed"] else "PASS"
        line = f"criterion {number:2d} {verdict}: {e['title']}"
        if e["failed"]:
            line += f" (failed: {', '.join(e['failed'])})"
        terminalreporter.write_line(line)
        for note in e["notes"]:
            terminalreporter.write_line(f"    {note}")
