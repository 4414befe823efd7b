import pytest

_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request, capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""
    store = request.config.stash.setdefault(_VERDICTS, {})

    def emit(number, title, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} [{number:2d}] {title}: {detail}"
        store[number] = line
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line

    return emit


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_VERDICTS, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        terminalreporter.write_line(store[number])
