import pytest

_LINES: list[str] = []


@pytest.fixture(scope="session")
def report(pytestconfig):
    """Print one PASS/FAIL line per criterion, live and again in the summary."""
    capman = pytestconfig.pluginmanager.getplugin("capturemanager")

    def emit(label: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        _LINES.append(line)
        with capman.global_and_fixture_disabled():
            print(f"\n{line}", flush=True)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
