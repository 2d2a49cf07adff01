import re

# criterion number -> [label, passed]; filled from tests named test_criterion_NN_label
_criteria: dict[int, list] = {}
_NAME = re.compile(r"test_criterion_(\d+)_(\w+?)(?:\[|$)")


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid.split("::")[-1])
    if not m:
        return
    entry = _criteria.setdefault(int(m.group(1)), [m.group(2).replace("_", " "), True])
    if report.failed or report.skipped:
        entry[1] = False


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        label, ok = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d}  {'PASS' if ok else 'FAIL'}  {label}")
