from __future__ import annotations

from pathlib import Path

import pytest

from stub_server import StubImageryServer, VirtualClock

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def stub():
    with StubImageryServer() as server:
        yield server


@pytest.fixture
def clock():
    return VirtualClock()


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


_CRITERIA: list[tuple[str, str, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        verdict = "PASS" if report.passed else "FAIL"
        _CRITERIA.append((verdict, marker.args[0], f"{report.duration:.2f}s"))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for verdict, name, duration in _CRITERIA:
        terminalreporter.write_line(f"{verdict}  {name}  ({duration})")
