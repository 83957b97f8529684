"""Collects ``@pytest.mark.criterion(n, title)`` outcomes into one PASS/FAIL line per criterion."""
import pytest

_VERDICTS: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    number, title = mark.args
    entry = _VERDICTS.setdefault(number, {"title": title, "passed": True, "seconds": 0.0, "notes": []})
    entry["passed"] &= rep.passed
    entry["seconds"] += rep.duration
    entry["notes"] += [f"{v}" for k, v in item.user_properties if k == "measured"]


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        e = _VERDICTS[number]
        status = "PASS" if e["passed"] else "FAIL"
        notes = "; ".join(e["notes"])
        terminalreporter.write_line(
            f"criterion {number}: {status}  {e['title']} ({e['seconds']:.1f} s){'  ' + notes if notes else ''}")
