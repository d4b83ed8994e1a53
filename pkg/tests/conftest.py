import sys
from dataclasses import replace
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from routerad.simulator import default_scenario  # noqa: E402
from routerad.trace import Direction, FlowRecord, Origin, SyscallEvent, Trace  # noqa: E402


@pytest.fixture(scope="session")
def scenario():
    return default_scenario()


@pytest.fixture
def short_scenario(scenario):
    return replace(scenario, duration=20.0, seed=11)


@pytest.fixture
def tiny_trace():
    sc = (SyscallEvent(0.1, 7, "read"), SyscallEvent(0.2, 7, "write"),
          SyscallEvent(0.3, 7, "read"), SyscallEvent(0.4, 7, "write"),
          SyscallEvent(1.5, 9, "futex", Origin.MALWARE))
    fl = (FlowRecord(0.25, Direction.OUTBOUND, "peer-a", 80, 100, 2),
          FlowRecord(0.75, Direction.OUTBOUND, "peer-a", 80, 300, 18),
          FlowRecord(1.25, Direction.INBOUND, "peer-b", 53, 60, 1, Origin.MALWARE))
    return Trace(2.0, sc, fl, "tiny", 5)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
