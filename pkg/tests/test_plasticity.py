from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sigmastream.graph import SYNC, Edge, Fragment, Kind, ProcessorSpec, StreamGraph, SubgraphTemplate, compose
from sigmastream.plasticity import (
    GraphVersion,
    ModificationConnector,
    PlasticityError,
    apply_modification,
    branch_catalog,
    connectors_for,
    first_arrival_predicate,
    replay_history,
)
from sigmastream.runtime import RunConfig, oracle_run, run

from conftest import handler

SYMBOLS = ["IBM", "IBM", "GOOG", "GOOG", "AMZN"]


def frag(symbol: str, seq: int = 0, **extra) -> Fragment:
    return Fragment({"symbol": symbol, **extra}, seq, seq)


def modifier_graph(predicate: str = "first_arrival") -> StreamGraph:
    template = SubgraphTemplate(
        (handler("price", "identity"), handler("out", "sink", endpoint="prices")),
        (Edge("price", "out"),),
        "price",
        ("symbol",),
    )
    mod = ProcessorSpec("router", Kind.MODIFIER, "modify",
                        {"key": "symbol", "param": "symbol", "predicate": predicate}, template)
    return compose([handler("src"), mod], [SYNC])


def test_first_arrival_sequence():
    p = first_arrival_predicate("symbol")
    assert [p(frag(s)) for s in SYMBOLS] == [True, False, True, False, True]


def test_first_arrival_empty_and_distinct():
    p = first_arrival_predicate("symbol")
    assert [p(frag(s)) for s in []] == []
    assert [p(frag(s)) for s in "ABC"] == [True, True, True]


def test_first_arrival_missing_key():
    p = first_arrival_predicate("symbol")
    with pytest.raises(PlasticityError):
        p(Fragment({"price": 1}, 0, 0))


def test_apply_modification_builds_three_branches():
    g = modifier_graph()
    conn = connectors_for(g)["router"]
    version = GraphVersion(g)
    fired = []
    for i, s in enumerate(SYMBOLS):
        version, decision = apply_modification(version, conn, frag(s, i))
        fired.append(decision.fired)
        assert decision.target == f"price[{s}]"
    assert fired == [True, False, True, False, True]
    assert set(branch_catalog(version)) == {"IBM", "GOOG", "AMZN"}
    assert version.number == 3
    assert "price[AMZN]" in version.graph


def test_second_ibm_keeps_version():
    g = modifier_graph()
    conn = connectors_for(g)["router"]
    v1, d1 = apply_modification(GraphVersion(g), conn, frag("IBM"))
    v2, d2 = apply_modification(v1, conn, frag("IBM", 1))
    assert v2 is v1 and v2.hash == v1.hash
    assert d1.created and not d2.created
    assert d2.target == "price[IBM]"


def test_never_predicate_is_unroutable():
    g = modifier_graph("never")
    conn = connectors_for(g)["router"]
    v, d = apply_modification(GraphVersion(g), conn, frag("IBM"))
    assert not d.routable and d.target is None
    assert branch_catalog(v) == {}


def test_modifier_must_be_installed():
    g = modifier_graph()
    conn = connectors_for(g)["router"]
    other = GraphVersion(compose([handler("x")]))
    with pytest.raises(PlasticityError):
        apply_modification(other, conn, frag("IBM"))


def test_fresh_catalog_empty():
    assert branch_catalog(GraphVersion(modifier_graph())) == {}


def test_seven_keys_seven_branches():
    rng = random.Random(11)
    keys = [f"K{i}" for i in range(7)]
    data = [frag(rng.choice(keys), i) for i in range(1000)]
    history = replay_history(modifier_graph(), "router", data)
    assert len(branch_catalog(history[-1])) == len({f.payload["symbol"] for f in data}) == 7


def test_runtime_routes_every_fragment_to_its_branch():
    g = modifier_graph()
    data = [{"symbol": s, "value": i} for i, s in enumerate(SYMBOLS * 20)]
    for report in (run(g, RunConfig(), {"src": data}), oracle_run(g, RunConfig(), {"src": data})):
        assert sorted(report.branches) == ["AMZN", "GOOG", "IBM"]
        out = report.outputs["prices"]
        assert len(out) == 100
        per_branch = {s: report.stats[f"price[{s}]"].in_count for s in ("IBM", "GOOG", "AMZN")}
        assert per_branch == {"IBM": 40, "GOOG": 40, "AMZN": 20}
        assert sum(per_branch.values()) == report.stats["router"].in_count
        for s in ("IBM", "GOOG", "AMZN"):
            seqs = [f.source_seq for f in out if f.payload["symbol"] == s]
            assert seqs == sorted(seqs)  # per-branch order


def test_run_history_matches_replay():
    g = modifier_graph()
    data = [frag(s, i) for i, s in enumerate(SYMBOLS)]
    report = oracle_run(g, RunConfig(), {"src": data})
    replayed = [v.hash for v in replay_history(g, "router", data)]
    assert report.history == replayed


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(list("ABCDEFG")), max_size=60))
def test_branch_count_equals_distinct_keys(keys):
    data = [frag(k, i) for i, k in enumerate(keys)]
    history = replay_history(modifier_graph(), "router", data)
    assert len(branch_catalog(history[-1])) == len(set(keys))
    # strictly increasing chain, one appended branch per step
    for prev, nxt in zip(history, history[1:]):
        assert nxt.number == prev.number + 1
        assert len(nxt.branches) == len(prev.branches) + 1
        assert nxt.parent == prev.hash
    again = replay_history(modifier_graph(), "router", data)
    assert [v.hash for v in again] == [v.hash for v in history]


def test_connector_from_spec_rejects_plain_nodes():
    with pytest.raises(PlasticityError):
        ModificationConnector.from_spec(handler("x"))
