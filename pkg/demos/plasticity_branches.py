"""A modifier growing one branch per new symbol.

The first quote of each symbol fires the first-arrival predicate and adds a
branch; later quotes of the same symbol reuse it.
"""
from __future__ import annotations

from pathlib import Path

from sigmastream import dsl
from sigmastream.endpoints import open_source
from sigmastream.plasticity import GraphVersion, apply_modification, connectors_for
from sigmastream.runtime import RunConfig, run

MODELS = Path(dsl.__file__).parent / "models"


def main() -> None:
    doc = dsl.parse_file(MODELS / "plasticity.sigma")
    quotes = list(open_source(MODELS / doc.bindings["quotes"]))

    connector = connectors_for(doc.graph)["router"]
    version = GraphVersion(doc.graph)
    for f in quotes:
        version, decision = apply_modification(version, connector, f)
        print(f"{f.payload['symbol']:<5} fired={str(decision.fired):<5} -> {decision.target:<16} "
              f"version {version.number} {version.hash[:12]}")

    report = run(doc.graph, RunConfig(seed=7), {"quotes": quotes})
    print("branches:", ", ".join(sorted(report.branches)))
    for f in report.outputs["ewma"]:
        print(f"  {f.payload['symbol']:<5} ewma {f.payload['ewma']}")


if __name__ == "__main__":
    main()
