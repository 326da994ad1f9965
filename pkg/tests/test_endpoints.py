from __future__ import annotations

import csv
import json
from decimal import Decimal

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sigmastream.endpoints import (
    AnimationEndpoint,
    DatasetEndpoint,
    EndpointError,
    Format,
    Mode,
    PlotEndpoint,
    animate,
    decode_record_lines,
    encode_record_lines,
    open_sink,
    open_source,
    plot_emit,
    read_dataset,
    read_frame,
    write_dataset,
)
from sigmastream.graph import Fragment, chain, compose
from sigmastream.runtime import RunConfig, oracle_run

from conftest import handler

FORMATS = [("d.csv", Format.DELIMITED_TEXT), ("d.jsonl", Format.RECORD_LINES)]


def sample(n=100):
    return [Fragment({"px": Decimal(f"{100 + i}.25"), "qty": i, "w": i / 4, "sym": f"S,{i}\"x",
                      "live": i % 2 == 0}, event_time=i * 1_000_000_000, source_seq=i, source="q")
            for i in range(n)]


@pytest.mark.parametrize("name,fmt", FORMATS)
def test_round_trip(tmp_path, name, fmt):
    frags = sample()
    write_dataset(tmp_path / name, frags)
    assert DatasetEndpoint(tmp_path / name).format is fmt
    back = read_dataset(tmp_path / name)
    assert back == frags
    # bytes are stable through a second round trip
    write_dataset(tmp_path / ("again" + name[1:]), back)
    assert (tmp_path / name).read_bytes() == (tmp_path / ("again" + name[1:])).read_bytes()


value = st.one_of(st.integers(-10**12, 10**12), st.booleans(), st.text(max_size=8),
                  st.floats(allow_nan=False, allow_infinity=False),
                  st.decimals(allow_nan=False, allow_infinity=False, places=4))


@settings(max_examples=40, deadline=None)
@given(st.lists(value, min_size=1, max_size=4), st.integers(1, 10), st.sampled_from(FORMATS))
def test_round_trip_property(tmp_path_factory, row, n, fmt):
    path = tmp_path_factory.mktemp("ds") / fmt[0]
    frags = [Fragment({f"f{j}": v for j, v in enumerate(row)}, i, i) for i in range(n)]
    write_dataset(path, frags)
    assert read_dataset(path) == frags


def test_source_seq_defaults_to_row_number(tmp_path):
    p = tmp_path / "plain.csv"
    p.write_text("x:int\n5\n6\n7\n")
    frags = read_dataset(p)
    assert [f.source_seq for f in frags] == [0, 1, 2]
    assert [f.payload["x"] for f in frags] == [5, 6, 7]


def test_malformed_row_rejected(tmp_path):
    p = tmp_path / "bad.csv"
    rows = ["x:int"] + [str(i) for i in range(10)]
    rows[4] = "oops"
    p.write_text("\n".join(rows) + "\n")
    src = open_source(p)
    frags = list(src)
    assert len(frags) == 9 and len(src.rejected) == 1
    assert src.rejected[0].line == 5
    assert [f.source_seq for f in frags] == list(range(9))


def test_missing_file_and_schema_mismatch(tmp_path):
    with pytest.raises(EndpointError):
        open_source(tmp_path / "nope.csv")
    p = tmp_path / "s.csv"
    p.write_text("x:int\n1\n")
    ep = DatasetEndpoint(p, schema=[("y", "int")])
    with pytest.raises(EndpointError):
        list(open_source(ep))
    p.write_text("x\n1\n")
    with pytest.raises(EndpointError):
        list(open_source(p))


def test_sink_rejects_schema_drift(tmp_path):
    with open_sink(DatasetEndpoint(tmp_path / "o.csv", mode=Mode.SINK)) as sink:
        assert sink.write(Fragment({"a": 1}, 0, 0))
        assert not sink.write(Fragment({"b": 1}, 1, 1))
        assert not sink.write(Fragment({"a": "text"}, 2, 2))
    assert sink.accepted == 1 and len(sink.rejected) == 2


def test_sink_file_is_rfc_csv(tmp_path):
    write_dataset(tmp_path / "o.csv", sample(3))
    with open(tmp_path / "o.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:5] == ["source_seq", "event_time", "source", "loops", "lane"]
    assert rows[1][8] == 'S,0"x'


def test_staged_equals_fused(tmp_path):
    a = [handler("a", "add", amount=3), handler("a2", "mul", factor=2)]
    b = [handler("b", "add", amount=-1)]
    data = [Fragment({"value": i}, i, i) for i in range(50)]
    fused = oracle_run(chain([compose(a), compose(b)]), RunConfig(), {"a": data})
    stage1 = oracle_run(compose(a), RunConfig(), {"a": data})
    write_dataset(tmp_path / "mid.csv", stage1.outputs["a2"])
    stage2 = oracle_run(compose(b), RunConfig(), {"b": open_source(tmp_path / "mid.csv")})
    write_dataset(tmp_path / "fused.csv", fused.outputs["b"])
    write_dataset(tmp_path / "staged.csv", stage2.outputs["b"])
    assert (tmp_path / "fused.csv").read_bytes() == (tmp_path / "staged.csv").read_bytes()


def test_source_reiterates(tmp_path):
    write_dataset(tmp_path / "d.jsonl", sample(5))
    src = open_source(tmp_path / "d.jsonl")
    assert list(src) == list(src)


def test_plot_windows(tmp_path):
    frags = [Fragment({"v": i * 10}, i, i) for i in range(5)]
    data, spec = plot_emit(PlotEndpoint(tmp_path / "p", 0, 4), reversed(frags))
    lines = data.read_text().splitlines()
    assert len(lines) == 6 and lines[1] == "0,0,0"
    data, _ = plot_emit(PlotEndpoint(tmp_path / "one", 2, 2, series=("v",)), frags)
    assert data.read_text().splitlines()[1:] == ["2,2,20"]
    assert json.loads((tmp_path / "one.plot.json").read_text())["window"] == [2, 2]
    with pytest.raises(EndpointError):
        plot_emit(PlotEndpoint(tmp_path / "x", 0, 5), frags)
    with pytest.raises(EndpointError):
        PlotEndpoint(tmp_path / "x", 3, 2)


def test_plot_rows_match_sink_rows(tmp_path):
    frags = sample(30)
    write_dataset(tmp_path / "sink.csv", frags)
    data, _ = plot_emit(PlotEndpoint(tmp_path / "plot", 5, 14, series=("qty", "px")), frags)
    with open(data, newline="") as fh:
        plotted = list(csv.reader(fh))[1:]
    sink_rows = {(str(f.source_seq), str(f.event_time), str(f.payload["qty"]), str(f.payload["px"]))
                 for f in read_dataset(tmp_path / "sink.csv") if 5 <= f.source_seq <= 14}
    assert {tuple(r) for r in plotted} == sink_rows


def values(frame):
    return [f.payload["value"] for f in read_frame(frame)]


def test_animation_sliding_window(tmp_path):
    frags = [Fragment({"value": i}, i, i) for i in range(1, 6)]
    frames = animate(AnimationEndpoint(tmp_path / "w3", window=3), frags)
    assert len(frames) == 5
    assert values(frames[-1]) == [3, 4, 5]
    frames = animate(AnimationEndpoint(tmp_path / "w10", window=10), frags)
    assert values(frames[-1]) == [1, 2, 3, 4, 5]
    frames = animate(AnimationEndpoint(tmp_path / "c2", window=2, cadence=2), frags)
    assert [values(f) for f in frames] == [[1, 2], [3, 4]]
    with pytest.raises(EndpointError):
        AnimationEndpoint(tmp_path, window=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(0, 20))
def test_animation_frame_property(w, n):
    ep = AnimationEndpoint("/nonexistent-unused", window=w, cadence=10**6)
    for i in range(n):
        ep(Fragment({"value": i}, i, i))
    assert [f.payload["value"] for f in ep.current()] == list(range(n))[max(0, n - w):]


def test_record_lines_codec():
    frags = sample(4)
    assert decode_record_lines(encode_record_lines(frags)) == frags
