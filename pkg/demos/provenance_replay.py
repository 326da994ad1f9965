"""Run with full bookkeeping, replay the run, print its provenance tree."""
from __future__ import annotations

import tempfile
from pathlib import Path

from sigmastream.contributions import Registry
from sigmastream.distribution import split_join
from sigmastream.graph import Kind, ProcessorSpec, chain, compose
from sigmastream.metamodel import execute, replay
from sigmastream.runtime import RunConfig


def node(nid: str, behavior: str, **params) -> ProcessorSpec:
    return ProcessorSpec(nid, Kind.HANDLER, behavior, params)


def main() -> None:
    registry = Registry(Path(tempfile.mkdtemp()) / "registry")
    graph = chain([
        compose([node("prices", "identity")]),
        split_join([node("up", "add", amount=1), node("down", "sub", amount=1)], resequenced=True),
        compose([node("smooth", "ewma", field="value", alpha=0.5, out="value")]),
    ])
    ex = execute(graph, RunConfig(seed=11, pool_size=2), {"prices": range(10)}, registry, "analyst", "bands")
    print("execution", ex.record.id)
    result = replay(ex.record.id, registry)
    print("replay:", result.match)
    output = ex.record.output_ids["smooth"]
    print(registry.provenance_tree(output), end="")


if __name__ == "__main__":
    main()
