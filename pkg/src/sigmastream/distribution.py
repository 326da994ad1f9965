"""Connector patterns and placement of spaces on execution contexts.

``split_join`` and ``feedback`` build graph fragments out of connector pairs.
``assign_spaces`` maps each space of a graph to an execution context and
returns a deployment plan; the graph value itself is never touched.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence, Union

from .graph import (
    ASYNC,
    Edge,
    GraphError,
    Kind,
    ProcessorSpec,
    Space,
    StreamGraph,
    SynchronicityMode,
    compose,
    partition_spaces,
)


class Policy(str, Enum):
    BROADCAST = "broadcast"
    KEY = "key"
    ROUND_ROBIN = "roundrobin"


def _as_graph(branch: StreamGraph | ProcessorSpec | Sequence[ProcessorSpec]) -> StreamGraph:
    if isinstance(branch, StreamGraph):
        return branch
    if isinstance(branch, ProcessorSpec):
        return compose([branch])
    return compose(list(branch))


def resequence(node_id: str, lanes: int | None = None, start: int = 0) -> ProcessorSpec:
    """Handler restoring ``source_seq`` order.

    ``lanes`` copies are expected per source fragment; by default the count
    is inferred from the graph at run time.
    """
    params: dict = {"start": start}
    if lanes is not None:
        if lanes < 1:
            raise GraphError("lanes must be >= 1")
        params["lanes"] = lanes
    return ProcessorSpec(node_id, Kind.HANDLER, "resequence", params)


def split_join(branches: Sequence[StreamGraph | ProcessorSpec | Sequence[ProcessorSpec]],
               policy: Policy | str = Policy.BROADCAST, *, key: str | None = None,
               mode: SynchronicityMode = ASYNC, resequenced: bool = False,
               prefix: str = "sj") -> StreamGraph:
    """``C_s`` fanning out to every branch and ``C_j`` fanning back in.

    All splitter-to-branch and branch-to-joiner edges use ``mode``, which
    must be asynchronous. With ``resequenced`` a resequencer follows the
    joiner so the fragment's output order is the source order.
    """
    policy = Policy(policy)
    graphs = [_as_graph(b) for b in branches]
    if not graphs:
        raise GraphError("split_join needs at least one branch")
    if not mode.is_async:
        raise GraphError("split/join edges must be asynchronous")
    params = {"policy": policy.value}
    if policy is Policy.KEY:
        if key is None:
            raise GraphError("key routing needs a key field")
        params["key"] = key
    splitter = ProcessorSpec(f"{prefix}.split", Kind.CONNECTOR, "split", params)
    joiner = ProcessorSpec(f"{prefix}.join", Kind.CONNECTOR, "join")
    nodes = [splitter]
    edges: list[Edge] = []
    seen = {splitter.id, joiner.id}
    for g in graphs:
        for n in g.nodes:
            if n.id in seen:
                raise GraphError(f"node id collision: {n.id!r}")
            seen.add(n.id)
        nodes.extend(g.nodes)
        edges.extend(Edge(splitter.id, s, mode) for s in g.sources)
        edges.extend(g.edges)
        edges.extend(Edge(s, joiner.id, mode) for s in g.sinks)
    nodes.append(joiner)
    sink = joiner.id
    if resequenced:
        reseq = resequence(f"{prefix}.reseq")
        nodes.append(reseq)
        edges.append(Edge(joiner.id, reseq.id))
        sink = reseq.id
    return StreamGraph(tuple(nodes), tuple(edges), (splitter.id,), (sink,))


@dataclass(frozen=True)
class LoopCondition:
    """Re-injection test ``payload[field] <op> value``, or a constant."""

    field: str = "value"
    op: str = "gt"
    value: object = 0
    always: bool | None = None

    def params(self) -> dict:
        if self.always is not None:
            return {"always": self.always}
        return {"field": self.field, "op": self.op, "value": self.value}


def feedback(body: StreamGraph | ProcessorSpec | Sequence[ProcessorSpec], predicate: LoopCondition,
             fuel: int, *, prefix: str = "fb",
             loop_mode: SynchronicityMode = ASYNC) -> StreamGraph:
    """Loop ``body`` while ``predicate`` holds, at most ``fuel`` times per fragment.

    Fragments that still satisfy the predicate after ``fuel`` re-injections
    go to the sink bound to endpoint ``"<prefix>.exhausted"``.
    """
    if fuel < 1:
        raise GraphError("fuel must be >= 1")
    if not loop_mode.is_async:
        raise GraphError("loopback edges must be asynchronous")
    g = _as_graph(body)
    entry = ProcessorSpec(f"{prefix}.split", Kind.CONNECTOR, "fb_split")
    exit_ = ProcessorSpec(f"{prefix}.out", Kind.HANDLER, "identity")
    overflow = ProcessorSpec(f"{prefix}.exhausted", Kind.HANDLER, "sink", {"endpoint": f"{prefix}.exhausted"})
    params = {"loop_to": entry.id, "overflow_to": overflow.id, "fuel": fuel, **predicate.params()}
    junction = ProcessorSpec(f"{prefix}.join", Kind.CONNECTOR, "fb_join", params)
    for n in g.nodes:
        if n.id in (entry.id, exit_.id, overflow.id, junction.id):
            raise GraphError(f"node id collision: {n.id!r}")
    edges = [Edge(entry.id, s) for s in g.sources]
    edges += list(g.edges)
    edges += [Edge(s, junction.id) for s in g.sinks]
    edges += [
        Edge(junction.id, entry.id, loop_mode),
        Edge(junction.id, exit_.id),
        Edge(junction.id, overflow.id),
    ]
    nodes = (entry, *g.nodes, junction, exit_, overflow)
    return StreamGraph(nodes, tuple(edges), (entry.id,), (exit_.id, overflow.id))


# -- deployment ---------------------------------------------------------------


@dataclass(frozen=True)
class InlinePool:
    """Run the space in the caller's context with ``size`` workers per node."""

    size: int = 1

    def __post_init__(self):
        if self.size < 1:
            raise GraphError("pool size must be >= 1")

    def __str__(self):
        return f"inline({self.size})"


@dataclass(frozen=True)
class WorkerContext:
    """A separate execution context; fragments cross into it through a channel."""

    name: str

    def __post_init__(self):
        if not re.fullmatch(r"[A-Za-z_][\w.-]*", self.name):
            raise GraphError(f"bad context name {self.name!r}")

    def __str__(self):
        return f"worker({self.name})"


Context = Union[InlinePool, WorkerContext]


@dataclass(frozen=True)
class DeploymentPlan:
    spaces: tuple[Space, ...]
    assignment: Mapping[str, Context] = field(default_factory=dict)

    def context_of(self, node_id: str) -> tuple[str, int | None]:
        for s in self.spaces:
            if node_id in s.members:
                ctx = self.assignment[s.id]
                if isinstance(ctx, InlinePool):
                    return "inline", ctx.size
                return ctx.name, None
        # nodes added at run time by plasticity live with the inline context
        return "inline", None

    def to_text(self) -> str:
        return "".join(f"{s.id} = {self.assignment[s.id]}\n" for s in self.spaces)


def assign_spaces(graph: StreamGraph, assignment: Mapping[str, Context]) -> DeploymentPlan:
    spaces = tuple(partition_spaces(graph))
    ids = {s.id for s in spaces}
    missing = sorted(ids - set(assignment))
    unknown = sorted(set(assignment) - ids)
    if missing:
        raise GraphError(f"unassigned spaces: {', '.join(missing)}")
    if unknown:
        raise GraphError(f"unknown spaces: {', '.join(unknown)}")
    return DeploymentPlan(spaces, dict(assignment))


_PLAN_LINE = re.compile(r"^\s*(\w+)\s*=\s*(inline|worker)\(\s*([^)\s]*)\s*\)\s*$")


def parse_plan(text: str) -> dict[str, Context]:
    """Read a plan file: one ``<space> = inline(<n>)`` or ``<space> = worker(<name>)`` per line."""
    out: dict[str, Context] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        m = _PLAN_LINE.match(line)
        if not m:
            raise GraphError(f"plan line {lineno}: cannot parse {line.strip()!r}")
        space, kind, arg = m.groups()
        if space in out:
            raise GraphError(f"plan line {lineno}: space {space} assigned twice")
        if kind == "inline":
            out[space] = InlinePool(int(arg) if arg else 1)
        else:
            out[space] = WorkerContext(arg)
    return out
