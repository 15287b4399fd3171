"""Per-criterion pass/fail summary for the acceptance suite."""

from collections import OrderedDict

import pytest

_CRITERIA = OrderedDict()
_ITEM_CRITERION = {}


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker is None:
            continue
        number, title = marker.args
        _CRITERIA.setdefault(number, {"title": title, "tests": OrderedDict()})
        _CRITERIA[number]["tests"][item.nodeid] = None
        _ITEM_CRITERION[item.nodeid] = number


@pytest.hookimpl(tryfirst=True)
def pytest_runtest_logreport(report):
    number = _ITEM_CRITERION.get(report.nodeid)
    if number is None:
        return
    tests = _CRITERIA[number]["tests"]
    measured = dict(report.user_properties).get("measured")
    if report.failed:
        tests[report.nodeid] = ("fail", measured)
    elif report.when == "call" and tests[report.nodeid] is None:
        tests[report.nodeid] = ("skip" if report.skipped else "pass", measured)
    elif report.skipped and tests[report.nodeid] is None:
        tests[report.nodeid] = ("skip", measured)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        results = [r for r in entry["tests"].values() if r is not None]
        if not results:
            continue
        failed = sum(r[0] == "fail" for r in results)
        status = "FAIL" if failed else "PASS"
        detail = "; ".join(r[1] for r in results if r[1])
        line = f"criterion {number:>2} {status}  {entry['title']}"
        if failed:
            line += f" ({failed} of {len(results)} checks failed)"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
