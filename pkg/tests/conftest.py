import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

_verdicts = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test belongs to")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n = mark.args[0]
    ok = call.excinfo is None or call.excinfo.errisinstance(_skip_types())
    _verdicts[n] = _verdicts.get(n, True) and ok


def _skip_types():
    import pytest
    return (pytest.skip.Exception,)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_verdicts):
        terminalreporter.write_line("criterion %d: %s" % (n, "PASS" if _verdicts[n] else "FAIL"))
