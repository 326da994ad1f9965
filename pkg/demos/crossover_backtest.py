"""Moving-average crossover over the bundled quote series.

Parses the bundled model, runs it against the bundled data, prints the
signals and writes a plot window of the fast/slow averages.
"""
from __future__ import annotations

import sys
import tempfile
from pathlib import Path

from sigmastream import dsl
from sigmastream.endpoints import PlotEndpoint, open_source, plot_emit
from sigmastream.runtime import RunConfig, run

MODELS = Path(dsl.__file__).parent / "models"


def main(out_dir: str | None = None) -> None:
    doc = dsl.parse_file(MODELS / "crossover.sigma")
    quotes = open_source(MODELS / doc.bindings["quotes"])
    report = run(doc.graph, RunConfig(seed=doc.directives.get("seed", 0)), {"quotes": quotes})
    print(f"{len(report.outputs['signals'])} signals from {report.stats['source'].out_count} quotes")
    for f in report.outputs["signals"]:
        p = f.payload
        print(f"  seq {f.source_seq:3d}  {p['signal']:<4}  mid {p['mid']}  fast {p['fast']:.4f}  slow {p['slow']:.4f}")

    # rerun without the cross stage so every averaged row reaches the sink
    doc2 = dsl.parse(MODELS.joinpath("crossover.sigma").read_text().replace(
        '|> cross(fast="fast", slow="slow", out="signal") ', ""))
    series = run(doc2.graph, RunConfig(), {"quotes": open_source(MODELS / "crossover.csv")}).outputs["signals"]
    target = Path(out_dir or tempfile.mkdtemp()) / "averages"
    data, spec = plot_emit(PlotEndpoint(target, 20, 59, series=("mid", "fast", "slow"),
                                        title="crossover averages"), series)
    print(f"plot data {data}\nplot spec {spec}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
