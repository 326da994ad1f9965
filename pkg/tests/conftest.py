from __future__ import annotations

import pytest

from sigmastream.contributions import Registry
from sigmastream.graph import Kind, ProcessorSpec


def handler(nid: str, behavior: str = "identity", **params) -> ProcessorSpec:
    return ProcessorSpec(nid, Kind.HANDLER, behavior, params)


def connector(nid: str, behavior: str = "split", **params) -> ProcessorSpec:
    return ProcessorSpec(nid, Kind.CONNECTOR, behavior, params)


def payloads(fragments, field="value"):
    return [f.payload[field] for f in fragments]


@pytest.fixture
def registry(tmp_path):
    ticks = iter(range(10**9))
    return Registry(tmp_path / "registry", clock=lambda: f"t{next(ticks):09d}")


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
