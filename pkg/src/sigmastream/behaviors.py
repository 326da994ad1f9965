"""Catalog of named processor behaviors.

A behavior turns one arriving fragment into zero or more emissions. An
emission is ``(target, fragment)``: ``target`` names one downstream node, or
is ``None`` to send along every outbound edge (and to the sink endpoint when
the node is a sink).

Host code extends the catalog with :func:`register_behavior`.
"""
from __future__ import annotations

import operator
import random
from collections import deque
from dataclasses import dataclass, replace
from decimal import Decimal
from fractions import Fraction
from typing import Any, Callable, Mapping

from .graph import Fragment, GraphError, Kind, ProcessorSpec, StreamGraph

Emission = tuple["str | None", Fragment]


class BehaviorError(GraphError):
    pass


@dataclass
class NodeContext:
    """What a processor may see of its surroundings."""

    spec: ProcessorSpec
    rng: random.Random
    targets: Callable[[], list[str]] = lambda: []
    reactives: Any = None
    graph: Callable[[], StreamGraph | None] = lambda: None

    @property
    def params(self) -> Mapping[str, Any]:
        return self.spec.params


class Processor:
    stateless = False

    def __init__(self, ctx: NodeContext):
        self.ctx = ctx

    def param(self, name: str, default=None):
        return self.ctx.spec.params.get(name, default)

    def process(self, fragment: Fragment) -> list[Emission]:
        raise NotImplementedError

    def flush(self) -> list[Emission]:
        return []


class Map(Processor):
    """One-in, at-most-one-out handler."""

    def apply(self, fragment: Fragment) -> Fragment | None:
        raise NotImplementedError

    def process(self, fragment):
        out = self.apply(fragment)
        return [] if out is None else [(None, out)]


@dataclass(frozen=True)
class BehaviorDef:
    name: str
    kind: Kind
    factory: Callable[[NodeContext], Processor]
    stateless: bool
    role: str = ""
    doc: str = ""


CATALOG: dict[str, BehaviorDef] = {}


def register_behavior(name: str, kind: Kind = Kind.HANDLER, *, stateless: bool = False, role: str = ""):
    """Class decorator adding a processor type to the catalog."""

    def deco(cls):
        cls.stateless = stateless
        CATALOG[name] = BehaviorDef(name, kind, cls, stateless, role, (cls.__doc__ or "").strip())
        return cls

    return deco


def lookup(name: str) -> BehaviorDef:
    try:
        return CATALOG[name]
    except KeyError:
        raise BehaviorError(f"unknown behavior {name!r}") from None


def build(ctx: NodeContext) -> Processor:
    return lookup(ctx.spec.behavior).factory(ctx)


# -- plumbing ---------------------------------------------------------------


@register_behavior("identity", stateless=True)
class Identity(Map):
    """Pass fragments through unchanged."""

    def apply(self, fragment):
        return fragment


@register_behavior("source", stateless=True)
class SourceNode(Identity):
    """Entry point bound to an endpoint."""


@register_behavior("sink", stateless=True)
class SinkNode(Identity):
    """Exit point bound to an endpoint."""


@register_behavior("project", stateless=True)
class Project(Map):
    """Keep only the comma-separated ``fields``."""

    def apply(self, fragment):
        keep = [f.strip() for f in str(self.param("fields", "")).split(",") if f.strip()]
        return replace(fragment, payload={k: fragment.payload[k] for k in keep})


# -- arithmetic ---------------------------------------------------------------


class _FieldOp(Map):
    def apply(self, fragment):
        name = self.param("field", "value")
        out = self.param("out", name)
        return fragment.with_payload(**{out: self.op(fragment.payload[name])})


@register_behavior("add", stateless=True)
class Add(_FieldOp):
    """``field + amount``."""

    def op(self, x):
        return x + self.param("amount", 1)


@register_behavior("sub", stateless=True)
class Sub(_FieldOp):
    """``field - amount``."""

    def op(self, x):
        return x - self.param("amount", 1)


@register_behavior("mul", stateless=True)
class Mul(_FieldOp):
    """``field * factor``."""

    def op(self, x):
        return x * self.param("factor", 1)


@register_behavior("scale", stateless=True)
class Scale(Mul):
    """Alias of ``mul``."""


@register_behavior("neg", stateless=True)
class Negate(_FieldOp):
    def op(self, x):
        return -x


@register_behavior("affine", stateless=True)
class Affine(_FieldOp):
    """``a * field + b``."""

    def op(self, x):
        return self.param("a", 1) * x + self.param("b", 0)


_COMPARE = {
    "gt": operator.gt, "ge": operator.ge, "lt": operator.lt,
    "le": operator.le, "eq": operator.eq, "ne": operator.ne,
}


def compare(op: str, a, b) -> bool:
    try:
        return _COMPARE[op](a, b)
    except KeyError:
        raise BehaviorError(f"unknown comparison {op!r}") from None


@register_behavior("filter", stateless=True)
class Filter(Map):
    """Keep fragments where ``field <op> value``."""

    def apply(self, fragment):
        keep = compare(self.param("op", "gt"), fragment.payload[self.param("field", "value")], self.param("value", 0))
        return fragment if keep else None


# -- market data ---------------------------------------------------------------


@register_behavior("midprice", stateless=True)
class MidPrice(Map):
    """``(bid + ask) / 2`` into ``out``."""

    def apply(self, fragment):
        bid = fragment.payload[self.param("bid", "bid")]
        ask = fragment.payload[self.param("ask", "ask")]
        return fragment.with_payload(**{self.param("out", "mid"): (bid + ask) / 2})


@register_behavior("ewma")
class Ewma(Map):
    """``alpha * x_t + (1 - alpha) * ewma_{t-1}``, seeded with the first value."""

    def __init__(self, ctx):
        super().__init__(ctx)
        self.value = None

    def apply(self, fragment):
        x = fragment.payload[self.param("field", "mid")]
        alpha = self.param("alpha", 0.5)
        if isinstance(x, Decimal) and not isinstance(alpha, Decimal):
            alpha = Decimal(repr(alpha))
        self.value = x if self.value is None else alpha * x + (1 - alpha) * self.value
        return fragment.with_payload(**{self.param("out", "ewma"): self.value})


@register_behavior("sma")
class Sma(Map):
    """Simple moving average over the last ``window`` values.

    Until the window is full the fragment passes without the ``out`` field.
    """

    def __init__(self, ctx):
        super().__init__(ctx)
        self.window: deque = deque(maxlen=int(self.param("window", 2)))

    def apply(self, fragment):
        self.window.append(fragment.payload[self.param("field", "mid")])
        if len(self.window) < self.window.maxlen:
            return fragment
        return fragment.with_payload(**{self.param("out", "sma"): sum(self.window) / len(self.window)})


@register_behavior("cross")
class Cross(Map):
    """Emit ``buy``/``sell`` when ``fast`` crosses ``slow``; drop other fragments."""

    def __init__(self, ctx):
        super().__init__(ctx)
        self.above: bool | None = None

    def apply(self, fragment):
        fast = fragment.payload.get(self.param("fast", "fast"))
        slow = fragment.payload.get(self.param("slow", "slow"))
        if fast is None or slow is None:
            return None
        above = fast > slow
        previous, self.above = self.above, above
        if previous is None or previous == above:
            return None
        return fragment.with_payload(**{self.param("out", "signal"): "buy" if above else "sell"})


@register_behavior("delay")
class Delay(Map):
    """Attach the value seen ``lag`` fragments earlier; drop until available."""

    def __init__(self, ctx):
        super().__init__(ctx)
        self.history: deque = deque(maxlen=int(self.param("lag", 1)) + 1)

    def apply(self, fragment):
        self.history.append(fragment.payload[self.param("field", "value")])
        if len(self.history) < self.history.maxlen:
            return None
        return fragment.with_payload(**{self.param("out", "lagged"): self.history[0]})


@register_behavior("jitter")
class Jitter(Map):
    """Add a seeded uniform integer in ``[low, high]`` to ``field``."""

    def apply(self, fragment):
        name = self.param("field", "value")
        d = self.ctx.rng.randint(int(self.param("low", -1)), int(self.param("high", 1)))
        return fragment.with_payload(**{self.param("out", name): fragment.payload[name] + d})


# -- connectors ---------------------------------------------------------------


@register_behavior("merge", Kind.CONNECTOR, stateless=True, role="join")
class Merge(Identity):
    """n:1 fan-in."""


@register_behavior("join", Kind.CONNECTOR, stateless=True, role="join")
class Join(Identity):
    """Joiner of a split-join."""


@register_behavior("split", Kind.CONNECTOR, role="split")
class Split(Processor):
    """Dispatch to branches: ``policy`` is broadcast, key or roundrobin.

    Broadcast copies carry the branch index as ``lane``. Key routing sends
    each distinct key to the next branch in turn on first sight and keeps it
    there.
    """

    def __init__(self, ctx):
        super().__init__(ctx)
        self.assigned: dict[str, int] = {}
        self.turn = 0

    def process(self, fragment):
        targets = self.ctx.targets()
        if not targets:
            return []
        policy = self.param("policy", "broadcast")
        if policy == "broadcast":
            # nested lanes stay unique: parent lane, then branch index
            width = len(targets)
            return [(t, replace(fragment, lane=fragment.lane * width + i)) for i, t in enumerate(targets)]
        if policy == "key":
            key = str(fragment.payload[self.param("key", "key")])
            if key not in self.assigned:
                self.assigned[key] = len(self.assigned) % len(targets)
            return [(targets[self.assigned[key] % len(targets)], fragment)]
        if policy == "roundrobin":
            t = targets[self.turn % len(targets)]
            self.turn += 1
            return [(t, fragment)]
        raise BehaviorError(f"unknown dispatch policy {policy!r}")


@register_behavior("fb_split", Kind.CONNECTOR, stateless=True, role="split")
class FeedbackSplit(Identity):
    """Entry of a feedback loop; merges fresh and looped fragments."""


@register_behavior("fb_join", Kind.CONNECTOR, stateless=True, role="join")
class FeedbackJoin(Processor):
    """Exit of a feedback loop.

    Fragments satisfying ``field <op> value`` (or every fragment when
    ``always`` is set) go back to ``loop_to`` with ``loops + 1`` while
    ``loops < fuel``; beyond that they go to ``overflow_to``. The rest leave
    through the remaining edges.
    """

    def process(self, fragment):
        loop_to = self.param("loop_to")
        overflow_to = self.param("overflow_to")
        always = self.param("always")
        if always is not None:
            again = bool(always)
        else:
            again = compare(self.param("op", "gt"), fragment.payload[self.param("field", "value")], self.param("value", 0))
        if again:
            if fragment.loops < int(self.param("fuel", 1)):
                return [(loop_to, replace(fragment, loops=fragment.loops + 1))]
            return [(overflow_to, fragment)]
        exits = [t for t in self.ctx.targets() if t not in (loop_to, overflow_to)]
        return [(t, fragment) for t in exits]


@register_behavior("resequence", stateless=False)
class Resequence(Processor):
    """Restore source order.

    Emits in increasing ``(source_seq, loops, lane)`` order; ``lanes`` is the
    number of copies expected per source fragment. Without it the count is
    read off the graph (see :func:`copies_reaching`). Whatever is still
    buffered at end of stream is flushed in order.
    """

    def __init__(self, ctx):
        super().__init__(ctx)
        self._lanes = self.param("lanes")
        self.next_seq = int(self.param("start", 0))
        self.buffer: dict[int, dict[int, Fragment]] = {}
        self.peak = 0

    @property
    def lanes(self) -> int:
        if self._lanes is None:
            graph = self.ctx.graph()
            self._lanes = copies_reaching(graph, self.ctx.spec.id) if graph is not None else 1
        return int(self._lanes)

    def process(self, fragment):
        slot = self.buffer.setdefault(fragment.source_seq, {})
        if fragment.lane in slot or fragment.source_seq < self.next_seq:
            raise BehaviorError(f"duplicate source_seq {fragment.source_seq} lane {fragment.lane}")
        slot[fragment.lane] = fragment
        out = []
        while len(self.buffer.get(self.next_seq, ())) >= self.lanes:
            ready = self.buffer.pop(self.next_seq)
            out.extend((None, ready[k]) for k in sorted(ready))
            self.next_seq += 1
        self.peak = max(self.peak, sum(len(s) for s in self.buffer.values()))
        return out

    def flush(self):
        out = []
        for seq in sorted(self.buffer):
            slot = self.buffer[seq]
            out.extend((None, slot[k]) for k in sorted(slot))
        self.buffer.clear()
        return out


# -- reactive and agent processors ---------------------------------------------------


@register_behavior("reactive", Kind.REACTIVE)
class ReactiveBinding(Map):
    """Set behavior ``behavior`` from payload ``field``, then forward the fragment."""

    def apply(self, fragment):
        graph = self.ctx.reactives
        if graph is None:
            raise BehaviorError(f"reactive node {self.ctx.spec.id!r} has no reactive graph")
        name = self.param("field", "value")
        if name not in fragment.payload:
            raise BehaviorError(f"fragment {fragment.source_seq} has no field {name!r}")
        graph.set(self.param("behavior", self.ctx.spec.id), fragment.payload[name])
        return fragment


@register_behavior("signal", Kind.AGENT, stateless=True)
class Signal(Map):
    """Stamp an agent signal on fragments.

    ``signal`` is one of yield_for, yield_until, acquire, release, cancel;
    ``duration``, ``until`` and ``resource`` are copied when given.
    """

    def apply(self, fragment):
        updates = {"signal": self.param("signal", "yield_for")}
        for name in ("duration", "until", "resource"):
            if self.param(name) is not None:
                updates[name] = self.param(name)
        return fragment.with_payload(**updates)


def catalog_kinds() -> dict[str, Kind]:
    return {name: d.kind for name, d in CATALOG.items()}


def copies_reaching(graph: StreamGraph, node_id: str) -> int:
    """Copies of one source fragment that reach ``node_id`` when nothing is dropped.

    Broadcast splits multiply, routing splits and modifiers divide among
    their targets, everything else forwards to every successor. Loop-back
    edges of feedback joins are ignored; feedback exits count once.
    """
    loop_edges = set()
    for n in graph.nodes:
        if n.behavior == "fb_join":
            loop_edges.add((n.id, n.params.get("loop_to")))
            loop_edges.add((n.id, n.params.get("overflow_to")))
    edges = [e for e in graph.edges if (e.src, e.dst) not in loop_edges]
    incoming: dict[str, list] = {n.id: [] for n in graph.nodes}
    outdeg: dict[str, int] = {n.id: 0 for n in graph.nodes}
    for e in edges:
        incoming[e.dst].append(e)
        outdeg[e.src] += 1
    count: dict[str, Fraction] = {}
    pending = set(incoming)
    while pending:
        ready = [n for n in pending if all(e.src in count for e in incoming[n])]
        if not ready:
            return 1
        for nid in ready:
            if not incoming[nid]:
                count[nid] = Fraction(1)
                continue
            total = Fraction(0)
            for e in incoming[nid]:
                src = graph.node(e.src)
                shared = src.kind is Kind.MODIFIER or (
                    src.behavior == "split" and src.params.get("policy", "broadcast") != "broadcast")
                total += count[e.src] / outdeg[e.src] if shared else count[e.src]
            count[nid] = total
            pending.discard(nid)
        pending -= set(count)
    return max(1, int(count[node_id]))
