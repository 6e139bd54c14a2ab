"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""
from collections import defaultdict

_results: dict = defaultdict(list)
_titles: dict = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("acceptance")
    if mark is None or call.when != "call" and not (call.when == "setup" and call.excinfo):
        return
    n, title = mark.args
    _titles[n] = title
    _results[n].append(call.excinfo is None)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        ok = all(_results[n])
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {_titles[n]}")
