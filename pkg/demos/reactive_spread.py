"""Push-based formulas over a quote stream.

``mid`` and ``spread`` follow the latest bid and ask; every update is
recomputed once, in dependency order.
"""
from __future__ import annotations

from sigmastream import dsl


MODEL = """
mid := midprice(bid, ask)
spread := ask - bid
skew := (mid - bid) / spread
"""


def main() -> None:
    graph = dsl.parse(MODEL).reactive_graph()
    graph.observe("mid", lambda name, value: print(f"    observed {name} = {value}"))
    for name, value in [("bid", 99.5), ("ask", 100.5), ("bid", 99.9), ("ask", 100.1)]:
        receipt = graph.set(name, value)
        print(f"set {name}={value}: recomputed {receipt[1:] or 'nothing yet'}")
    print(graph.values())


if __name__ == "__main__":
    main()
