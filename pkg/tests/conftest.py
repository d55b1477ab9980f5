import re
from collections import OrderedDict

# Map acceptance-test outcomes (tests named test_c<NN>_...) to a per-criterion
# pass/fail line printed at the end of the session.
_ACCEPTANCE = OrderedDict()
_NAME_RE = re.compile(r"test_c(\d+)")


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid or report.when != "call":
        return
    m = _NAME_RE.search(report.nodeid)
    if not m:
        return
    key = int(m.group(1))
    name = report.nodeid.split("::")[-1]
    _ACCEPTANCE[key] = (name, report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for key in sorted(_ACCEPTANCE):
        name, outcome = _ACCEPTANCE[key]
        status = "PASS" if outcome == "passed" else outcome.upper()
        terminalreporter.write_line(f"criterion {key:2d}: {status}  {name}")
