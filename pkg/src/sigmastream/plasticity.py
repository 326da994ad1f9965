"""Runtime self-modification of model graphs.

A modification connector pairs a predicate over fragments with a sub-graph
template. When the predicate fires, a branch instantiated from the template
is appended to the graph and keyed by the fragment's routing key; later
fragments with the same key are routed to that branch.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Mapping

from .graph import (
    Edge,
    Fragment,
    GraphError,
    Kind,
    ProcessorSpec,
    StreamGraph,
    SubgraphTemplate,
    canonical_json,
)


class PlasticityError(GraphError):
    pass


@dataclass(frozen=True)
class FieldKey:
    """Key extractor reading one payload field as a string."""

    field: str

    def __call__(self, fragment: Fragment) -> str:
        try:
            return str(fragment.payload[self.field])
        except KeyError:
            raise PlasticityError(f"fragment {fragment.source_seq} has no key field {self.field!r}") from None


class Predicate:
    """Base predicate ``X -> {true, false}``."""

    pure = True

    def __call__(self, fragment: Fragment) -> bool:
        raise NotImplementedError

    def state(self) -> list:
        return []


@dataclass
class FirstArrival(Predicate):
    """True exactly once per distinct key; remembers the keys it has seen."""

    key_extractor: Callable[[Fragment], str]
    seen: set[str] = field(default_factory=set)
    pure = False

    def __call__(self, fragment: Fragment) -> bool:
        key = self.key_extractor(fragment)
        if key in self.seen:
            return False
        self.seen.add(key)
        return True

    def state(self) -> list:
        return sorted(self.seen)


@dataclass
class Constant(Predicate):
    value: bool

    def __call__(self, fragment: Fragment) -> bool:
        return self.value


def first_arrival_predicate(key_extractor: Callable[[Fragment], str] | str) -> FirstArrival:
    if isinstance(key_extractor, str):
        key_extractor = FieldKey(key_extractor)
    return FirstArrival(key_extractor)


@dataclass
class ModificationConnector:
    """``C_p = f(P, graph, template)`` installed at ``node_id``.

    ``param`` names the template parameter bound to the routing key.
    """

    node_id: str
    predicate: Predicate
    template: SubgraphTemplate
    key_extractor: Callable[[Fragment], str]
    param: str = "key"

    @classmethod
    def from_spec(cls, spec: ProcessorSpec) -> ModificationConnector:
        if spec.kind is not Kind.MODIFIER or spec.template is None:
            raise PlasticityError(f"{spec.id!r} is not a modifier with a template")
        key = FieldKey(str(spec.params.get("key", "key")))
        kind = spec.params.get("predicate", "first_arrival")
        if kind == "first_arrival":
            predicate: Predicate = FirstArrival(key)
        elif kind in ("always", "never"):
            predicate = Constant(kind == "always")
        else:
            raise PlasticityError(f"unknown predicate {kind!r}")
        return cls(spec.id, predicate, spec.template, key, str(spec.params.get("param", "key")))


@dataclass(frozen=True)
class Branch:
    modifier: str
    key: str
    nodes: tuple[str, ...]
    entry: str


@dataclass(frozen=True)
class GraphVersion:
    """One immutable step in a graph's modification history."""

    graph: StreamGraph
    number: int = 0
    branches: tuple[Branch, ...] = ()
    parent: str | None = None

    @cached_property
    def hash(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()

    def serialize(self) -> str:
        return canonical_json({
            "graph": self.graph.to_dict(),
            "number": self.number,
            "parent": self.parent,
            "branches": [
                {"modifier": b.modifier, "key": b.key, "nodes": list(b.nodes), "entry": b.entry}
                for b in self.branches
            ],
        })

    def branch(self, modifier: str, key: str) -> Branch | None:
        for b in self.branches:
            if b.modifier == modifier and b.key == key:
                return b
        return None


@dataclass(frozen=True)
class RouteDecision:
    key: str
    fired: bool
    target: str | None
    created: bool

    @property
    def routable(self) -> bool:
        return self.target is not None


def apply_modification(version: GraphVersion, connector: ModificationConnector,
                       fragment: Fragment) -> tuple[GraphVersion, RouteDecision]:
    """Evaluate the connector on one fragment.

    Returns the (possibly new) graph version and where the fragment goes.
    The new version is complete before the decision is returned, so no
    fragment observes a half-installed branch.
    """
    if connector.node_id not in version.graph:
        raise PlasticityError(f"modifier {connector.node_id!r} is not installed in the graph")
    key = connector.key_extractor(fragment)
    fired = connector.predicate(fragment)
    existing = version.branch(connector.node_id, key)
    if existing is not None or not fired:
        target = existing.entry if existing else None
        return version, RouteDecision(key, fired, target, False)

    template = connector.template
    nodes, edges = template.instantiate(key, {connector.param: key})
    entry = template.instance_id(template.entry, key)
    internal_src = {e.src for e in template.edges}
    sinks = [
        n.id for n, t in zip(nodes, template.nodes)
        if t.behavior == "sink" or t.id not in internal_src
    ]
    graph = version.graph.extend(
        nodes=nodes,
        edges=[*edges, Edge(connector.node_id, entry, template.entry_mode)],
        sinks=sinks,
    )
    branch = Branch(connector.node_id, key, tuple(n.id for n in nodes), entry)
    new = GraphVersion(graph, version.number + 1, version.branches + (branch,), version.hash)
    return new, RouteDecision(key, fired, entry, True)


def branch_catalog(version: GraphVersion, modifier: str | None = None) -> dict[str, tuple[str, ...]]:
    return {
        b.key: b.nodes
        for b in version.branches
        if modifier is None or b.modifier == modifier
    }


def connectors_for(graph: StreamGraph) -> Mapping[str, ModificationConnector]:
    return {
        n.id: ModificationConnector.from_spec(n)
        for n in graph.nodes
        if n.kind is Kind.MODIFIER
    }


def replay_history(graph: StreamGraph, modifier: str, fragments) -> list[GraphVersion]:
    """Feed fragments through a fresh connector and return every version produced."""
    connector = connectors_for(graph)[modifier]
    version = GraphVersion(graph)
    history = [version]
    for frag in fragments:
        version, decision = apply_modification(version, connector, frag)
        if decision.created:
            history.append(version)
    return history
