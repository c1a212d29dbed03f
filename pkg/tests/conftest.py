import os
import re
import sys

sys.path.insert(0, os.path.dirname(__file__))

_AC = re.compile(r"test_ac(\d+)_(\w+)")
_results = {}


def pytest_runtest_logreport(report):
    m = _AC.search(report.nodeid)
    if not m or "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _results[int(m.group(1))] = (report.outcome, m.group(2).replace("_", " "), report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_results):
        outcome, name, dur = _results[k]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"AC{k:<2} {status}  {name}  ({dur:.1f} s)")
