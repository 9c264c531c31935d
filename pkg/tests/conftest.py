_ACCEPTANCE_REPORTS = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        _ACCEPTANCE_REPORTS.append(report)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_REPORTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for report in sorted(_ACCEPTANCE_REPORTS, key=lambda r: r.nodeid):
        status = "PASS" if report.passed else "FAIL"
        name = report.nodeid.split("::")[-1]
        terminalreporter.write_line(f"{status}  {name}")
