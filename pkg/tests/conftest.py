import re

import pytest

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")
_results: dict[int, list] = {}
_titles: dict[int, str] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = _CRITERION.search(item.nodeid)
        if m:
            doc = (item.function.__doc__ or "").strip().splitlines()
            _titles.setdefault(int(m.group(1)), doc[0] if doc else item.name)


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m or (report.when != "call" and report.passed):
        return
    n = int(m.group(1))
    measured = "; ".join(str(v) for k, v in report.user_properties if k == "measured")
    _results.setdefault(n, []).append((report.passed and report.when == "call", measured, report.longrepr))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_titles):
        runs = _results.get(n)
        if not runs:
            status, detail = "NOT RUN", ""
        else:
            status = "PASS" if all(ok for ok, _, _ in runs) else "FAIL"
            detail = "; ".join(m for _, m, _ in runs if m)
            if status == "FAIL" and not detail:
                reason = next((r for ok, _, r in runs if not ok), None)
                detail = str(getattr(reason, "reprcrash", None) and reason.reprcrash.message or "")[:200]
        line = f"criterion {n:2d}: {status:4s}  {_titles[n]}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))


@pytest.fixture
def measured(record_property):
    """Attach a measured value to the acceptance summary line."""
    def add(text):
        record_property("measured", text)
    return add
