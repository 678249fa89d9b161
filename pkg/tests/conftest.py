import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_verdicts: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    key = mark.args[0]
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        _verdicts[key] = (mark.args[1], "PASS" if rep.passed else "FAIL", getattr(item, "_detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for key in sorted(_verdicts):
        title, verdict, detail = _verdicts[key]
        line = f"criterion {key:2d} {verdict}  {title}"
        tr.write_line(f"{line}  [{detail}]" if detail else line)
