"""Seeded generators for the bundled example datasets.

``python -m sigmastream.datagen`` rewrites the files under ``models/``;
the committed copies are the reference data for the examples.
"""
from __future__ import annotations

from decimal import Decimal
from pathlib import Path

import numpy as np

from .endpoints import Column, DatasetEndpoint, Mode, open_sink
from .graph import Fragment

MODELS = Path(__file__).with_name("models")
SECOND = 1_000_000_000


def crossover_series(rows: int = 200, seed: int = 7) -> list[Fragment]:
    """Random-walk quotes, one per second, prices in cents."""
    rng = np.random.default_rng(seed)
    steps = rng.normal(0.0, 0.35, rows)
    mids = 100.0 + np.cumsum(steps)
    spreads = rng.integers(2, 9, rows)
    out = []
    for i in range(rows):
        mid_cents = int(round(mids[i] * 100))
        half = int(spreads[i])
        bid = Decimal(mid_cents - half) / 100
        ask = Decimal(mid_cents + half) / 100
        out.append(Fragment({"bid": bid, "ask": ask}, i * SECOND, i, "quotes"))
    return out


PLASTICITY_SYMBOLS = ("IBM", "IBM", "GOOG", "GOOG", "AMZN")


def plasticity_feed(seed: int = 7) -> list[Fragment]:
    rng = np.random.default_rng(seed)
    base = {"IBM": 140, "GOOG": 170, "AMZN": 180}
    out = []
    for i, sym in enumerate(PLASTICITY_SYMBOLS):
        mid = base[sym] * 100 + int(rng.integers(-50, 51))
        bid, ask = Decimal(mid - 5) / 100, Decimal(mid + 5) / 100
        out.append(Fragment({"symbol": sym, "bid": bid, "ask": ask}, i * SECOND, i, "quotes"))
    return out


def write(path: Path, fragments: list[Fragment], schema: tuple[Column, ...]) -> None:
    with open_sink(DatasetEndpoint(path, schema=schema, mode=Mode.SINK)) as sink:
        for f in fragments:
            sink.write(f)


def main() -> None:
    write(MODELS / "crossover.csv", crossover_series(),
          (Column("bid", "decimal"), Column("ask", "decimal")))
    write(MODELS / "plasticity.csv", plasticity_feed(),
          (Column("symbol", "text"), Column("bid", "decimal"), Column("ask", "decimal")))


if __name__ == "__main__":
    main()
