import pytest

_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []
    config.addinivalue_line("markers", "acceptance(number): end-to-end acceptance criterion")


@pytest.fixture
def record(request):
    """Log one acceptance line: ``record(number, title, passed, detail)``."""

    def _record(number, title, passed, detail):
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        request.config.stash[_RESULTS].append((number, line))
        print(line)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(results, key=lambda item: item[0]):
        terminalreporter.write_line(line)
