import asyncio
import os

import pytest

CRITERIA: dict[int, tuple[str, str, str]] = {}  # number -> (title, outcome, detail)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion check")
    config.addinivalue_line("markers", "live: spawns a local cluster")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        detail = ""
        if rep.failed and call.excinfo is not None:
            detail = str(call.excinfo.value).splitlines()[0][:160] if str(call.excinfo.value) else ""
        result = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        prev = CRITERIA.get(n)
        # a criterion checked by several tests passes only if all of them do
        if prev is None or prev[1] == "PASS" or result == "FAIL":
            CRITERIA[n] = (title, result, detail if result == "FAIL" else (prev[2] if prev else ""))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        title, result, detail = CRITERIA[n]
        line = f"criterion {n:2d} {result}: {title}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


def run(coro):
    """Run a coroutine on a fresh event loop (uvloop when available, like the daemons)."""
    try:
        import uvloop
        loop = uvloop.new_event_loop()
    except ImportError:
        loop = asyncio.new_event_loop()
    try:
        return loop.run_until_complete(coro)
    finally:
        loop.close()


@pytest.fixture
def arun():
    return run


@pytest.fixture
def base_port(worker_id="master"):
    return int(os.environ.get("LIGHTFAAS_TEST_PORT", "20000"))
