import pytest

_ACCEPTANCE = pytest.StashKey[dict]()
N_CRITERIA = 13


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture
def criterion(request):
    """Record the outcome of one acceptance criterion: ``criterion(number, passed, detail)``."""
    results = request.config.stash[_ACCEPTANCE]

    def record(number: int, passed: bool, detail: str) -> bool:
        results[number] = (bool(passed), detail)
        print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, N_CRITERIA + 1):
        if number not in results:
            terminalreporter.write_line(f"criterion {number:2d}: NOT RUN  (errored before recording, or deselected)")
            continue
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
