import pytest

VERDICTS = []


@pytest.fixture
def announce(request):
    """Record a one-line criterion verdict and echo it to the terminal."""
    reporter = request.config.pluginmanager.getplugin("terminalreporter")

    def emit(n, ok: bool, detail: str) -> None:
        line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}"
        VERDICTS.append(line)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
