import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
        reason = ""
        if rep.failed:
            reason = str(rep.longrepr.reprcrash.message).splitlines()[0] if hasattr(rep.longrepr, "reprcrash") else ""
        prev = _CRITERIA.get(number)
        if prev is not None and prev[1] == "FAIL":
            return  # a parametrized case already failed this criterion
        _CRITERIA[number] = (title, status, reason)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, reason = _CRITERIA[number]
        line = f"criterion {number}: {status}  {title}"
        if reason:
            line += f"  [{reason[:160]}]"
        terminalreporter.write_line(line)
