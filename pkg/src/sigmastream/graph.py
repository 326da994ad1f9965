"""Graph representation of financial models.

A model is a directed graph of processors (nodes) joined by synchronicity
edges. Graph values are immutable; every builder returns a new graph.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from decimal import Decimal
from enum import Enum
from functools import cached_property
from typing import Any, Iterable, Mapping, Sequence, Union

Scalar = Union[int, float, Decimal, str, bool]

DEFAULT_QUEUE_CAPACITY = 1024


class GraphError(ValueError):
    """Raised when a graph cannot be built as requested."""


class Kind(str, Enum):
    HANDLER = "Handler"
    CONNECTOR = "Connector"
    MODIFIER = "Modifier"
    REACTIVE = "Reactive"
    AGENT = "Agent"


@dataclass(frozen=True)
class Fragment:
    """One unit of data flowing along an edge.

    ``loops`` counts feedback passes and ``lane`` distinguishes broadcast
    copies of the same source fragment; both feed the resequencing key.
    """

    payload: Mapping[str, Scalar]
    event_time: int = 0
    source_seq: int = 0
    source: str = ""
    loops: int = 0
    lane: int = 0

    def __post_init__(self):
        object.__setattr__(self, "payload", dict(self.payload))

    def __hash__(self):
        return hash(self.key())

    def __getitem__(self, name: str) -> Scalar:
        return self.payload[name]

    def key(self) -> tuple:
        items = tuple((k, type(v).__name__, v) for k, v in self.payload.items())
        return (items, self.event_time, self.source_seq, self.source, self.loops, self.lane)

    def with_payload(self, **updates: Scalar) -> Fragment:
        payload = dict(self.payload)
        payload.update(updates)
        return replace(self, payload=payload)

    def to_dict(self) -> dict:
        return {
            "payload": {k: encode_scalar(v) for k, v in self.payload.items()},
            "event_time": self.event_time,
            "source_seq": self.source_seq,
            "source": self.source,
            "loops": self.loops,
            "lane": self.lane,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> Fragment:
        return cls(
            payload={k: decode_scalar(v) for k, v in d["payload"].items()},
            event_time=d.get("event_time", 0),
            source_seq=d.get("source_seq", 0),
            source=d.get("source", ""),
            loops=d.get("loops", 0),
            lane=d.get("lane", 0),
        )


def encode_scalar(value: Any) -> Any:
    if isinstance(value, Decimal):
        return {"$decimal": str(value)}
    if isinstance(value, (bool, int, float, str)) or value is None:
        return value
    raise TypeError(f"not a scalar: {value!r}")


def decode_scalar(value: Any) -> Any:
    if isinstance(value, dict) and "$decimal" in value:
        return Decimal(value["$decimal"])
    return value


@dataclass(frozen=True)
class SynchronicityMode:
    mode: str
    queue_capacity: int | None = None

    def __post_init__(self):
        if self.mode == "sync":
            if self.queue_capacity is not None:
                raise GraphError("sync edges carry no queue capacity")
        elif self.mode == "async":
            if self.queue_capacity is None or self.queue_capacity < 1:
                raise GraphError("async edges need a positive queue capacity")
        else:
            raise GraphError(f"unknown synchronicity mode {self.mode!r}")

    @property
    def is_async(self) -> bool:
        return self.mode == "async"

    @classmethod
    def async_(cls, capacity: int = DEFAULT_QUEUE_CAPACITY) -> SynchronicityMode:
        return cls("async", capacity)

    def __str__(self):
        return "Sync" if self.mode == "sync" else f"Async({self.queue_capacity})"


SYNC = SynchronicityMode("sync")
ASYNC = SynchronicityMode.async_()


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    mode: SynchronicityMode = SYNC


@dataclass(frozen=True)
class SubgraphTemplate:
    """Parameterised branch appended to a graph by a modification connector.

    Parameter placeholders are string params of the form ``"$name"``.
    Instance ids are ``"<template id>[<key>]"``.
    """

    nodes: tuple[ProcessorSpec, ...]
    edges: tuple[Edge, ...]
    entry: str
    parameters: tuple[str, ...] = ()
    entry_mode: SynchronicityMode = SYNC

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))
        object.__setattr__(self, "parameters", tuple(self.parameters))
        ids = [n.id for n in self.nodes]
        if self.entry not in ids:
            raise GraphError(f"template entry {self.entry!r} is not a template node")

    def instance_id(self, node_id: str, key: str) -> str:
        return f"{node_id}[{key}]"

    def instantiate(self, key: str, bindings: Mapping[str, Scalar]) -> tuple[list[ProcessorSpec], list[Edge]]:
        missing = [p for p in self.parameters if p not in bindings]
        if missing:
            raise GraphError(f"unbound template parameters: {', '.join(missing)}")

        def subst(value):
            if isinstance(value, str) and value.startswith("$"):
                name = value[1:]
                if name not in bindings:
                    raise GraphError(f"unbound template parameter {name!r}")
                return bindings[name]
            return value

        nodes = [
            replace(n, id=self.instance_id(n.id, key),
                    params={k: subst(v) for k, v in n.params.items()})
            for n in self.nodes
        ]
        edges = [
            Edge(self.instance_id(e.src, key), self.instance_id(e.dst, key), e.mode)
            for e in self.edges
        ]
        return nodes, edges

    def to_dict(self) -> dict:
        return {
            "nodes": [n.to_dict() for n in self.nodes],
            "edges": [_edge_dict(e) for e in self.edges],
            "entry": self.entry,
            "parameters": list(self.parameters),
            "entry_mode": _mode_dict(self.entry_mode),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> SubgraphTemplate:
        return cls(
            nodes=tuple(ProcessorSpec.from_dict(n) for n in d["nodes"]),
            edges=tuple(_edge_from(e) for e in d["edges"]),
            entry=d["entry"],
            parameters=tuple(d["parameters"]),
            entry_mode=_mode_from(d["entry_mode"]),
        )


@dataclass(frozen=True)
class ProcessorSpec:
    id: str
    kind: Kind = Kind.HANDLER
    behavior: str = "identity"
    params: Mapping[str, Scalar] = field(default_factory=dict)
    template: SubgraphTemplate | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "params", dict(self.params))
        if not self.id:
            raise GraphError("processor id must be non-empty")

    def __hash__(self):
        return hash((self.id, self.kind, self.behavior))

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "kind": self.kind.value,
            "behavior": self.behavior,
            "params": {k: encode_scalar(v) for k, v in self.params.items()},
        }
        if self.template is not None:
            d["template"] = self.template.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> ProcessorSpec:
        template = d.get("template")
        return cls(
            id=d["id"],
            kind=Kind(d["kind"]),
            behavior=d["behavior"],
            params={k: decode_scalar(v) for k, v in d["params"].items()},
            template=SubgraphTemplate.from_dict(template) if template else None,
        )


def _mode_dict(mode: SynchronicityMode) -> dict:
    return {"mode": mode.mode, "queue_capacity": mode.queue_capacity}


def _mode_from(d: Mapping) -> SynchronicityMode:
    return SynchronicityMode(d["mode"], d["queue_capacity"])


def _edge_dict(e: Edge) -> dict:
    return {"src": e.src, "dst": e.dst, **_mode_dict(e.mode)}


def _edge_from(d: Mapping) -> Edge:
    return Edge(d["src"], d["dst"], _mode_from(d))


@dataclass(frozen=True)
class StreamGraph:
    """Immutable model graph. Node and edge order is declaration order."""

    nodes: tuple[ProcessorSpec, ...] = ()
    edges: tuple[Edge, ...] = ()
    sources: tuple[str, ...] = ()
    sinks: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("nodes", "edges", "sources", "sinks"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @cached_property
    def _by_id(self) -> dict[str, ProcessorSpec]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def _out(self) -> dict[str, list[Edge]]:
        out: dict[str, list[Edge]] = {n.id: [] for n in self.nodes}
        for e in self.edges:
            out.setdefault(e.src, []).append(e)
        return out

    @cached_property
    def _in(self) -> dict[str, list[Edge]]:
        inn: dict[str, list[Edge]] = {n.id: [] for n in self.nodes}
        for e in self.edges:
            inn.setdefault(e.dst, []).append(e)
        return inn

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._by_id

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, node_id: str) -> ProcessorSpec:
        try:
            return self._by_id[node_id]
        except KeyError:
            raise GraphError(f"unknown node {node_id!r}") from None

    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def out_edges(self, node_id: str) -> list[Edge]:
        return list(self._out.get(node_id, ()))

    def in_edges(self, node_id: str) -> list[Edge]:
        return list(self._in.get(node_id, ()))

    def successors(self, node_id: str) -> list[str]:
        return [e.dst for e in self._out.get(node_id, ())]

    def endpoint(self, node_id: str) -> str | None:
        """Endpoint name bound to a source or sink node, if any."""
        return self.node(node_id).params.get("endpoint")

    def extend(self, nodes: Iterable[ProcessorSpec] = (), edges: Iterable[Edge] = (),
               sources: Iterable[str] = (), sinks: Iterable[str] = ()) -> StreamGraph:
        nodes = list(nodes)
        clash = [n.id for n in nodes if n.id in self._by_id]
        if clash:
            raise GraphError(f"node id collision: {', '.join(clash)}")
        return StreamGraph(
            self.nodes + tuple(nodes),
            self.edges + tuple(edges),
            self.sources + tuple(sources),
            self.sinks + tuple(sinks),
        )

    def to_dict(self) -> dict:
        return {
            "nodes": [n.to_dict() for n in self.nodes],
            "edges": [_edge_dict(e) for e in self.edges],
            "sources": list(self.sources),
            "sinks": list(self.sinks),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> StreamGraph:
        return cls(
            nodes=tuple(ProcessorSpec.from_dict(n) for n in d["nodes"]),
            edges=tuple(_edge_from(e) for e in d["edges"]),
            sources=tuple(d["sources"]),
            sinks=tuple(d["sinks"]),
        )


def canonical_json(obj: Any) -> str:
    """Deterministic text form shared by all persisted records."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False) + "\n"


def serialize(graph: StreamGraph) -> str:
    return canonical_json({"graph": graph.to_dict()})


def deserialize(text: str) -> StreamGraph:
    return StreamGraph.from_dict(json.loads(text)["graph"])


# -- builders ---------------------------------------------------------------


def _check_modes(modes, expected: int) -> list[SynchronicityMode]:
    if isinstance(modes, SynchronicityMode):
        return [modes] * expected
    modes = list(modes)
    if len(modes) != expected:
        raise GraphError(f"arity mismatch: expected {expected} modes, got {len(modes)}")
    return modes


def compose(processors: Sequence[ProcessorSpec], modes: Sequence[SynchronicityMode] | SynchronicityMode = SYNC) -> StreamGraph:
    """Chain processors linearly: ``x -> P1 d1 P2 d2 ... Pn``."""
    processors = list(processors)
    if not processors:
        raise GraphError("cannot compose an empty processor list")
    if isinstance(modes, SynchronicityMode):
        modes = [modes] * (len(processors) - 1)
    modes = _check_modes(modes, len(processors) - 1)
    ids = [p.id for p in processors]
    if len(set(ids)) != len(ids):
        raise GraphError("node id collision in chain")
    for p in processors:
        if p.kind is Kind.CONNECTOR:
            lo_in = int(p.params.get("min_in", 1))
            lo_out = int(p.params.get("min_out", 1))
            if lo_in > 1 or lo_out > 1:
                raise GraphError(f"arity mismatch: connector {p.id!r} needs {lo_in}:{lo_out} ports in a linear chain")
    edges = [Edge(a.id, b.id, m) for a, b, m in zip(processors, processors[1:], modes)]
    return StreamGraph(tuple(processors), tuple(edges), (ids[0],), (ids[-1],))


def connect(connector: ProcessorSpec, inbound: Sequence[StreamGraph], outbound: Sequence[StreamGraph],
            modes: Sequence[SynchronicityMode] | SynchronicityMode = SYNC) -> StreamGraph:
    """Bridge ``n`` inbound sub-graphs to ``m`` outbound sub-graphs through a connector.

    ``modes`` is one mode for every bridge edge, or a list with one mode per
    inbound graph followed by one per outbound graph.
    """
    if connector.kind is not Kind.CONNECTOR:
        raise GraphError(f"{connector.id!r} is a {connector.kind.value}, not a Connector")
    inbound, outbound = list(inbound), list(outbound)
    _check_connector_arity(connector, len(inbound), len(outbound))
    modes = _check_modes(modes, len(inbound) + len(outbound))

    seen: set[str] = {connector.id}
    for g in inbound + outbound:
        for nid in g.node_ids():
            if nid in seen:
                raise GraphError(f"node id collision: {nid!r}")
            seen.add(nid)

    nodes: list[ProcessorSpec] = []
    edges: list[Edge] = []
    sources: list[str] = []
    sinks: list[str] = []
    for g, m in zip(inbound, modes):
        nodes.extend(g.nodes)
        edges.extend(g.edges)
        sources.extend(g.sources)
        edges.extend(Edge(s, connector.id, m) for s in g.sinks)
    nodes.append(connector)
    for g, m in zip(outbound, modes[len(inbound):]):
        nodes.extend(g.nodes)
        edges.extend(g.edges)
        sinks.extend(g.sinks)
        edges.extend(Edge(connector.id, s, m) for s in g.sources)
    if not inbound:
        sources.append(connector.id)
    if not outbound:
        sinks.append(connector.id)
    return StreamGraph(tuple(nodes), tuple(edges), tuple(sources), tuple(sinks))


def chain(graphs: Sequence[StreamGraph], modes: Sequence[SynchronicityMode] | SynchronicityMode = SYNC) -> StreamGraph:
    """Concatenate graphs; each part's sinks feed the next part's sources.

    Nodes with the ``sink`` behavior stay terminal.
    """
    graphs = list(graphs)
    if not graphs:
        raise GraphError("cannot chain an empty list of graphs")
    modes = _check_modes(modes, len(graphs) - 1)
    seen: set[str] = set()
    for g in graphs:
        for nid in g.node_ids():
            if nid in seen:
                raise GraphError(f"node id collision: {nid!r}")
            seen.add(nid)
    nodes = [n for g in graphs for n in g.nodes]
    edges = [e for g in graphs for e in g.edges]
    sinks: list[str] = []
    for a, b, m in zip(graphs, graphs[1:], modes):
        for s in a.sinks:
            if a.node(s).behavior == "sink":
                sinks.append(s)  # explicit sinks stay terminal
            else:
                edges.extend(Edge(s, t, m) for t in b.sources)
    sinks.extend(graphs[-1].sinks)
    return StreamGraph(tuple(nodes), tuple(edges), graphs[0].sources, tuple(sinks))


def _check_connector_arity(c: ProcessorSpec, n_in: int, n_out: int) -> None:
    max_in, max_out = c.params.get("max_in"), c.params.get("max_out")
    if max_in is not None and n_in > int(max_in):
        raise GraphError(f"arity violation: {c.id!r} accepts at most {max_in} inbound graphs")
    if max_out is not None and n_out > int(max_out):
        raise GraphError(f"arity violation: {c.id!r} accepts at most {max_out} outbound graphs")
    if n_in + n_out == 0:
        raise GraphError(f"arity violation: {c.id!r} bridges nothing")


# -- validation ---------------------------------------------------------------

JOIN_BEHAVIORS = frozenset({"join", "merge", "fb_join"})
SPLIT_BEHAVIORS = frozenset({"split", "fb_split"})


def validate(graph: StreamGraph) -> list[str]:
    """Return an ordered list of structural violations; empty means valid."""
    report: list[str] = []
    ids = graph.node_ids()
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        report.append(f"duplicate node ids: {', '.join(dup)}")
    known = set(ids)
    for e in graph.edges:
        for end in (e.src, e.dst):
            if end not in known:
                report.append(f"edge {e.src}->{e.dst} references unknown node {end!r}")
    for role, group in (("source", graph.sources), ("sink", graph.sinks)):
        for nid in group:
            if nid not in known:
                report.append(f"{role} {nid!r} is not a node")
    if report:
        return report
    if not graph.nodes:
        return report
    if not graph.sources:
        report.append("graph has no sources")

    reached = _reachable(graph, graph.sources)
    for nid in ids:
        if nid not in reached:
            report.append(f"node {nid!r} unreachable from any source")

    src, snk = set(graph.sources), set(graph.sinks)
    for node in graph.nodes:
        n_in = len(graph.in_edges(node.id)) + (node.id in src)
        n_out = len(graph.out_edges(node.id)) + (node.id in snk)
        problem = _arity_problem(node, n_in, n_out)
        if problem:
            report.append(f"arity: {node.id!r} {problem}")

    report.extend(_cycle_violations(graph))
    return report


def _arity_problem(node: ProcessorSpec, n_in: int, n_out: int) -> str | None:
    k = node.kind
    if k is Kind.HANDLER:
        if n_in != 1 or n_out != 1:
            return f"Handler needs 1 inbound and 1 outbound port, has {n_in}:{n_out}"
    elif k is Kind.CONNECTOR:
        if n_in < 1 or n_out < 1:
            return f"Connector needs n>=1 inbound and m>=1 outbound ports, has {n_in}:{n_out}"
        for bound, n, side in (("max_in", n_in, "inbound"), ("max_out", n_out, "outbound")):
            if node.params.get(bound) is not None and n > int(node.params[bound]):
                return f"Connector allows at most {node.params[bound]} {side} ports, has {n}"
    elif k is Kind.MODIFIER:
        if n_in != 1:
            return f"Modifier needs 1 inbound port, has {n_in}"
        if node.template is None:
            return "Modifier has no sub-graph template"
    elif k is Kind.REACTIVE:
        if n_in != 1 or n_out > 1:
            return f"Reactive needs 1 inbound and at most 1 outbound port, has {n_in}:{n_out}"
    return None


def _reachable(graph: StreamGraph, starts: Iterable[str]) -> set[str]:
    seen: set[str] = set()
    stack = [s for s in starts if s in graph]
    while stack:
        n = stack.pop()
        if n in seen:
            continue
        seen.add(n)
        stack.extend(graph.successors(n))
    return seen


def _sccs(ids: Sequence[str], succ) -> list[list[str]]:
    """Tarjan's strongly connected components, iterative."""
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    out: list[list[str]] = []
    counter = 0
    for root in ids:
        if root in index:
            continue
        work = [(root, iter(succ(root)))]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            v, it = work[-1]
            advanced = False
            for w in it:
                if w not in index:
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(succ(w))))
                    advanced = True
                    break
                if w in on_stack:
                    low[v] = min(low[v], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                low[work[-1][0]] = min(low[work[-1][0]], low[v])
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == v:
                        break
                out.append(comp)
    return out


def _is_loopback(graph: StreamGraph, e: Edge) -> bool:
    src, dst = graph.node(e.src), graph.node(e.dst)
    return (
        e.mode.is_async
        and src.kind is Kind.CONNECTOR and src.behavior in JOIN_BEHAVIORS
        and dst.kind is Kind.CONNECTOR and dst.behavior in SPLIT_BEHAVIORS
    )


def _cycle_violations(graph: StreamGraph) -> list[str]:
    report = []
    ids = graph.node_ids()
    for comp in _sccs(ids, graph.successors):
        members = set(comp)
        if len(comp) == 1 and comp[0] not in graph.successors(comp[0]):
            continue
        order = [i for i in ids if i in members]
        inner = [e for e in graph.edges if e.src in members and e.dst in members]
        all_sync = all(not e.mode.is_async for e in inner)
        remaining = [e for e in inner if not _is_loopback(graph, e)]

        def succ(n, remaining=remaining):
            return [e.dst for e in remaining if e.src == n]

        still_cyclic = any(
            len(c) > 1 or c[0] in succ(c[0]) for c in _sccs(order, succ)
        )
        if still_cyclic:
            label = "sync cycle" if all_sync else "cycle without async join->split loopback"
            report.append(f"{label}: {' -> '.join(order)}")
    return report


def topological_order(graph: StreamGraph) -> list[str]:
    """Node order ignoring loopback edges; ties follow declaration order."""
    indeg = {n: 0 for n in graph.node_ids()}
    live = [e for e in graph.edges if not _is_loopback(graph, e)]
    for e in live:
        indeg[e.dst] += 1
    ready = [n for n in graph.node_ids() if indeg[n] == 0]
    out = []
    position = {n: i for i, n in enumerate(graph.node_ids())}
    while ready:
        ready.sort(key=position.__getitem__)
        n = ready.pop(0)
        out.append(n)
        for e in live:
            if e.src == n:
                indeg[e.dst] -= 1
                if indeg[e.dst] == 0:
                    ready.append(e.dst)
    if len(out) != len(indeg):
        raise GraphError("graph has a cycle outside any feedback loopback")
    return out


# -- spaces -------------------------------------------------------------------


@dataclass(frozen=True)
class Space:
    id: str
    members: frozenset[str]

    def __post_init__(self):
        if not self.members:
            raise GraphError("a space needs at least one member")


def partition_spaces(graph: StreamGraph) -> list[Space]:
    """Split the graph into connector-bounded spaces.

    A connector stays with its upstream side when it has one inbound edge,
    otherwise with its downstream side when it has one outbound edge, and
    forms a space of its own when it has several of both.
    """
    problems = validate(graph)
    if problems:
        raise GraphError(f"invalid graph: {problems[0]}")
    kept: list[Edge] = []
    for e in graph.edges:
        if _edge_kept(graph, e):
            kept.append(e)
    parent = {n: n for n in graph.node_ids()}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for e in kept:
        a, b = find(e.src), find(e.dst)
        if a != b:
            parent[b] = a
    groups: dict[str, list[str]] = {}
    for n in graph.node_ids():
        groups.setdefault(find(n), []).append(n)
    return [Space(f"S{i}", frozenset(members)) for i, members in enumerate(groups.values())]


def _edge_kept(graph: StreamGraph, e: Edge) -> bool:
    for end, other_side in ((e.src, "out"), (e.dst, "in")):
        node = graph.node(end)
        if node.kind is not Kind.CONNECTOR:
            continue
        n_in = len(graph.in_edges(end))
        n_out = len(graph.out_edges(end))
        # the connector keeps exactly one attaching edge, or none
        if n_in == 1:
            keep = graph.in_edges(end)[0]
        elif n_out == 1:
            keep = graph.out_edges(end)[0]
        else:
            keep = None
        if keep != e:
            return False
    return True


def space_of(spaces: Iterable[Space], node_id: str) -> Space:
    for s in spaces:
        if node_id in s.members:
            return s
    raise GraphError(f"node {node_id!r} belongs to no space")
