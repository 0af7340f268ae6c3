import pytest

_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the terminal summary prints them all in order."""

    def record(number, title, passed, detail):
        request.config.stash[_RESULTS].append((number, title, passed, detail))
        print(f"{'PASS' if passed else 'FAIL'} criterion {number} ({title}): {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = sorted(config.stash[_RESULTS])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in results:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number:>2} ({title}): {detail}")
