"""Per-criterion pass/fail summary for the acceptance suite.

Tests tagged ``@pytest.mark.criterion("8a", "text")`` are grouped by id; a
criterion passes only if every test carrying its id passed. Measured values
recorded with ``record_property("detail", ...)`` are echoed on the line.
"""

from collections import OrderedDict

import pytest

_CRITERIA: "OrderedDict[str, dict]" = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, text): acceptance criterion tag")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if report.when != "call" and not report.failed:
        return
    cid, text = mark.args
    entry = _CRITERIA.setdefault(cid, {"text": text, "ok": True, "details": []})
    if report.failed:
        entry["ok"] = False
    if report.when == "call":
        entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def _sort_key(cid):
    # numbered criteria first, in numeric order; tagged extras (M1, ...) after
    if cid[0].isdigit():
        digits = "".join(ch for ch in cid if ch.isdigit())
        return (0, int(digits), cid)
    return (1, 0, cid)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_CRITERIA, key=_sort_key):
        entry = _CRITERIA[cid]
        status = "PASS" if entry["ok"] else "FAIL"
        detail = "; ".join(entry["details"])
        line = f"criterion {cid}: {status} - {entry['text']}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
