"""Prints one pass/fail line per acceptance criterion after the run."""

_CRITERIA: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    marker = "test_acceptance.py::test_criterion_"
    if marker in report.nodeid:
        name = report.nodeid.split("::")[-1]
        _CRITERIA[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split("_")[2])):
        number = name.split("_")[2]
        outcome = "PASS" if _CRITERIA[name] == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {outcome}")
