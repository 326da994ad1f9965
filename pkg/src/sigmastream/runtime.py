"""Execution of model graphs.

Two engines share one stepping core:

* ``oracle_run`` executes one fragment at a time, depth first, following
  outbound edges in declaration order. It is the reference semantics.
* ``run`` in MultiTask mode gives every node a pool of worker threads. A
  sync edge hands a fragment over by running the downstream node inside the
  upstream task, so the upstream cannot take its next fragment before the
  whole consecutive sync chain has finished. An async edge enqueues into a
  bounded queue and returns; a full queue blocks the producer.
"""
from __future__ import annotations

import hashlib
import heapq
import logging
import queue
import threading
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Iterable, Iterator, Mapping

from . import behaviors
from .graph import (
    Edge,
    Fragment,
    GraphError,
    Kind,
    ProcessorSpec,
    StreamGraph,
    canonical_json,
    topological_order,
    validate,
)
from .plasticity import GraphVersion, ModificationConnector, apply_modification, branch_catalog
from .seeding import check_seed, derive_rng

log = logging.getLogger(__name__)


class RunError(RuntimeError):
    pass


class UnboundEndpoint(RunError):
    pass


class RunAborted(RunError):
    def __init__(self, message: str, report: RunReport):
        super().__init__(message)
        self.report = report


class ExecMode(str, Enum):
    MULTI_TASK = "MultiTask"
    SINGLE_TASK_ORACLE = "SingleTaskOracle"


@dataclass(frozen=True)
class RunConfig:
    pool_size: int = 1
    seed: int = 0
    mode: ExecMode = ExecMode.MULTI_TASK
    pool_sizes: Mapping[str, int] = field(default_factory=dict)
    failure_threshold: int | None = None
    deployment: Any = None
    config_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", ExecMode(self.mode))
        check_seed(self.seed)
        if self.pool_size < 1 or any(s < 1 for s in self.pool_sizes.values()):
            raise ValueError("pool sizes must be >= 1")

    def to_dict(self) -> dict:
        return {
            "pool_size": self.pool_size,
            "seed": self.seed,
            "mode": self.mode.value,
            "pool_sizes": dict(sorted(self.pool_sizes.items())),
            "failure_threshold": self.failure_threshold,
            "config_id": self.config_id,
        }


@dataclass
class NodeStats:
    in_count: int = 0
    out_count: int = 0
    dropped: int = 0


@dataclass(frozen=True)
class NodeFailure:
    node: str
    source_seq: int
    message: str


@dataclass
class RunReport:
    """Counts and outputs of one run. ``outputs`` is keyed by sink endpoint."""

    stats: dict[str, NodeStats] = field(default_factory=dict)
    outputs: dict[str, list[Fragment]] = field(default_factory=dict)
    wall_time: float = 0.0
    seed: int = 0
    mode: str = ExecMode.MULTI_TASK.value
    config_id: str | None = None
    input_ids: list[str] = field(default_factory=list)
    processor_ids: list[str] = field(default_factory=list)
    output_ids: list[str] = field(default_factory=list)
    errors: list[NodeFailure] = field(default_factory=list)
    cancelled: bool = False
    fuel_exhausted: int = 0
    peak_resident: int = 0
    queue_capacity: int = 0
    graph_version: int = 0
    history: list[str] = field(default_factory=list)
    branches: dict[str, list[str]] = field(default_factory=dict)
    predicates: dict[str, list] = field(default_factory=dict)

    def output_digest(self) -> str:
        return digest_outputs(self.outputs)

    def to_record(self) -> dict:
        return {
            "stats": {k: [s.in_count, s.out_count, s.dropped] for k, s in sorted(self.stats.items())},
            "outputs": {k: len(v) for k, v in sorted(self.outputs.items())},
            "output_digest": self.output_digest(),
            "wall_time": round(self.wall_time, 6),
            "seed": self.seed,
            "mode": self.mode,
            "config_id": self.config_id,
            "input_ids": list(self.input_ids),
            "processor_ids": list(self.processor_ids),
            "output_ids": list(self.output_ids),
            "errors": [[e.node, e.source_seq, e.message] for e in self.errors],
            "cancelled": self.cancelled,
            "fuel_exhausted": self.fuel_exhausted,
            "graph_version": self.graph_version,
            "history": list(self.history),
            "branches": {k: list(v) for k, v in sorted(self.branches.items())},
            "predicates": {k: list(v) for k, v in sorted(self.predicates.items())},
        }

    def serialize(self) -> str:
        return canonical_json(self.to_record())


def fragment_line(f: Fragment) -> str:
    return canonical_json(f.to_dict()).replace("\n", "")


def digest_outputs(outputs: Mapping[str, list[Fragment]], ordered: bool = True) -> str:
    h = hashlib.sha256()
    for name in sorted(outputs):
        lines = [fragment_line(f) for f in outputs[name]]
        if not ordered:
            lines.sort()
        h.update(name.encode() + b"\x00")
        for line in lines:
            h.update(line.encode() + b"\n")
    return h.hexdigest()


def as_fragments(items: Iterable, source: str = "") -> Iterator[Fragment]:
    """Accept fragments or plain payload mappings; number the latter in order."""
    for i, item in enumerate(items):
        if isinstance(item, Fragment):
            yield item
        elif isinstance(item, Mapping):
            yield Fragment(item, event_time=i, source_seq=i, source=source)
        else:
            yield Fragment({"value": item}, event_time=i, source_seq=i, source=source)


# -- shared core -------------------------------------------------------------


class _Node:
    def __init__(self, spec: ProcessorSpec, processor, stats: NodeStats, pool: int, context: str):
        self.spec = spec
        self.processor = processor
        self.stats = stats
        self.pool = pool
        self.context = context
        self.permit = threading.Semaphore(pool)
        self.inbox: queue.SimpleQueue | None = None
        self.workers: list[threading.Thread] = []


class _Engine:
    def __init__(self, graph: StreamGraph, config: RunConfig, inputs: Mapping[str, Iterable],
                 sinks: Mapping[str, Callable[[Fragment], None]] | None, reactives):
        problems = validate(graph)
        if problems:
            raise GraphError("invalid graph: " + "; ".join(problems))
        self.config = config
        self.version = GraphVersion(graph)
        self.reactives = reactives
        self.consumers = dict(sinks or {})
        self.report = RunReport(seed=config.seed, mode=config.mode.value, config_id=config.config_id)
        self.nodes: dict[str, _Node] = {}
        self.modifiers: dict[str, ModificationConnector] = {}
        self.out_edges: dict[str, list[Edge]] = {}
        self.sink_names: dict[str, str] = {}
        self.sink_locks: dict[str, threading.Lock] = {}
        self.graph_lock = threading.RLock()
        self.errors_lock = threading.Lock()
        self.stats_lock = threading.Lock()
        self.cancel_event = threading.Event()
        self.feeds = self._bind_inputs(graph, inputs)
        self.report.history.append(self.version.hash)
        self._install(graph.nodes, graph.edges, graph.sinks)

    @property
    def graph(self) -> StreamGraph:
        return self.version.graph

    def _bind_inputs(self, graph: StreamGraph, inputs: Mapping[str, Iterable]) -> list[tuple[str, Iterable]]:
        feeds = []
        for nid in graph.sources:
            name = graph.endpoint(nid)
            if name is not None and name in inputs:
                feeds.append((nid, inputs[name]))
            elif nid in inputs:
                feeds.append((nid, inputs[nid]))
            else:
                raise UnboundEndpoint(f"source {nid!r} (endpoint {name!r}) is not bound to any input")
        return feeds

    def _context_of(self, nid: str) -> tuple[str, int | None]:
        plan = self.config.deployment
        if plan is None:
            return "inline", None
        return plan.context_of(nid)

    def _install(self, specs: Iterable[ProcessorSpec], edges: Iterable[Edge], sinks: Iterable[str]) -> list[_Node]:
        created = []
        for spec in specs:
            stats = self.report.stats.setdefault(spec.id, NodeStats())
            ctx = behaviors.NodeContext(
                spec=spec,
                rng=derive_rng(self.config.seed, spec.id),
                targets=(lambda nid=spec.id: [e.dst for e in self.out_edges.get(nid, ())]),
                reactives=self.reactives,
                graph=lambda: self.version.graph,
            )
            if spec.kind is Kind.MODIFIER:
                connector = ModificationConnector.from_spec(spec)
                self.modifiers[spec.id] = connector
                processor = None
                stateless = False
            else:
                processor = behaviors.build(ctx)
                stateless = processor.stateless
            context, plan_pool = self._context_of(spec.id)
            pool = self.config.pool_sizes.get(spec.id)
            if pool is not None and pool > 1 and not stateless:
                raise RunError(f"node {spec.id!r} is stateful; pool size must be 1")
            if pool is None:
                pool = plan_pool if plan_pool is not None else self.config.pool_size
                if not stateless:
                    pool = 1
            node = _Node(spec, processor, stats, pool, context)
            self.nodes[spec.id] = node
            self.out_edges.setdefault(spec.id, [])
            created.append(node)
        for e in edges:
            self.out_edges.setdefault(e.src, []).append(e)
        for nid in sinks:
            name = self.graph.endpoint(nid) or nid
            self.sink_names[nid] = name
            self.report.outputs.setdefault(name, [])
            self.sink_locks.setdefault(name, threading.Lock())
        return created

    def _fail(self, nid: str, frag: Fragment, exc: Exception) -> None:
        with self.errors_lock:
            self.report.errors.append(NodeFailure(nid, frag.source_seq, f"{type(exc).__name__}: {exc}"))
            limit = self.config.failure_threshold
            if limit is not None and len(self.report.errors) > limit:
                self.cancel_event.set()

    def _emissions(self, node: _Node, frag: Fragment):
        if node.spec.kind is Kind.MODIFIER:
            with self.graph_lock:
                before = self.version
                self.version, decision = apply_modification(before, self.modifiers[node.spec.id], frag)
                if decision.created:
                    self.report.history.append(self.version.hash)
                    b = self.version.branches[-1]
                    new_specs = [self.version.graph.node(n) for n in b.nodes]
                    new_edges = self.version.graph.edges[len(before.graph.edges):]
                    new_sinks = self.version.graph.sinks[len(before.graph.sinks):]
                    self._on_installed(self._install(new_specs, new_edges, new_sinks))
            return [(decision.target, frag)] if decision.routable else []
        return node.processor.process(frag)

    def _on_installed(self, nodes: list[_Node]) -> None:
        pass

    def _route(self, nid: str, emissions) -> list[tuple[Edge | None, Fragment]]:
        """Turn emissions into deliveries; sink deliveries carry edge ``None``."""
        node = self.nodes[nid]
        edges = self.out_edges.get(nid, [])
        out = []
        for target, f in emissions:
            if target is None:
                out.extend((e, f) for e in edges)
                if nid in self.sink_names:
                    out.append((None, f))
            else:
                matched = [e for e in edges if e.dst == target]
                if not matched:
                    raise RunError(f"{nid!r} emitted to {target!r}, which is not downstream")
                out.append((matched[0], f))
                if node.spec.behavior == "fb_join" and target == node.spec.params.get("overflow_to"):
                    with self.stats_lock:
                        self.report.fuel_exhausted += 1
        return out

    def _step(self, nid: str, frag: Fragment) -> list[tuple[Edge | None, Fragment]]:
        node = self.nodes[nid]
        with self.stats_lock:
            node.stats.in_count += 1
        try:
            emissions = self._emissions(node, frag)
        except Exception as exc:
            with self.stats_lock:
                node.stats.dropped += 1
            self._fail(nid, frag, exc)
            return []
        return self._deliver(nid, emissions)

    def _deliver(self, nid: str, emissions) -> list[tuple[Edge, Fragment]]:
        node = self.nodes[nid]
        if not emissions:
            with self.stats_lock:
                node.stats.dropped += 1
            return []
        deliveries = self._route(nid, emissions)
        with self.stats_lock:
            node.stats.out_count += len(deliveries)
        forward = []
        for edge, f in deliveries:
            if edge is None:
                self._emit_sink(nid, f)
            else:
                forward.append((edge, f))
        return forward

    def _emit_sink(self, nid: str, f: Fragment) -> None:
        name = self.sink_names[nid]
        with self.sink_locks[name]:
            self.report.outputs[name].append(f)
            consumer = self.consumers.get(name) or self.consumers.get(nid)
            if consumer is not None:
                consumer(f)

    def _flush_order(self) -> list[str]:
        return topological_order(self.graph)

    def _finish(self, started: float) -> RunReport:
        r = self.report
        r.wall_time = time.perf_counter() - started
        r.cancelled = self.cancel_event.is_set()
        r.graph_version = self.version.number
        r.branches = {k: list(v) for k, v in branch_catalog(self.version).items()}
        r.predicates = {k: c.predicate.state() for k, c in self.modifiers.items()}
        r.queue_capacity = sum(e.mode.queue_capacity or 0 for e in self.graph.edges if e.mode.is_async)
        limit = self.config.failure_threshold
        if limit is not None and len(r.errors) > limit:
            raise RunAborted(f"{len(r.errors)} behavior failures exceed threshold {limit}", r)
        return r


def _merged(feeds: list[tuple[str, Iterable]]) -> Iterator[tuple[str, Fragment]]:
    """Interleave sources by (event_time, source order, source_seq)."""
    def keyed(i, nid, items):
        for f in as_fragments(items, nid):
            yield (f.event_time, i, f.source_seq), nid, f

    streams = [keyed(i, nid, items) for i, (nid, items) in enumerate(feeds)]
    for _, nid, f in heapq.merge(*streams, key=lambda t: t[0]):
        yield nid, f


class OracleEngine(_Engine):
    """Single task, depth-first, one fragment at a time."""

    def push(self, nid: str, frag: Fragment) -> None:
        stack = [(nid, frag)]
        while stack:
            n, f = stack.pop()
            forward = self._step(n, f)
            stack.extend((e.dst, g) for e, g in reversed(forward))

    def flush(self) -> None:
        for nid in self._flush_order():
            node = self.nodes[nid]
            if node.processor is None:
                continue
            emissions = node.processor.flush()
            if emissions:
                stack = [(e.dst, g) for e, g in reversed(self._deliver(nid, emissions))]
                while stack:
                    n, f = stack.pop()
                    stack.extend((e.dst, g) for e, g in reversed(self._step(n, f)))

    def execute(self) -> RunReport:
        started = time.perf_counter()
        for nid, frag in _merged(self.feeds):
            if self.cancel_event.is_set():
                break
            self.push(nid, frag)
        self.flush()
        return self._finish(started)


_STOP = object()


class ThreadedEngine(_Engine):
    """Worker pools per node; see the module docstring for hand-off rules."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.cond = threading.Condition()
        self.pending = 0
        self.resident = 0
        self.peak_resident = 0
        self.slots: dict[int, threading.Semaphore] = {}
        self.started = False
        self.finished = threading.Event()
        self.result: RunReport | None = None
        self.failure: BaseException | None = None
        self.consumed = Counter()
        for node in self.nodes.values():
            self._start_workers(node)

    # workers are created lazily when a node first receives queued work
    def _start_workers(self, node: _Node) -> None:
        node.inbox = queue.SimpleQueue()

    def _ensure_workers(self, node: _Node) -> None:
        if node.workers:
            return
        with self.graph_lock:
            if node.workers:
                return
            for i in range(node.pool):
                t = threading.Thread(target=self._worker, args=(node,), daemon=True,
                                     name=f"{node.context}/{node.spec.id}/{i}")
                node.workers.append(t)
                t.start()

    def _on_installed(self, nodes):
        for node in nodes:
            self._start_workers(node)

    def _slot(self, edge: Edge) -> threading.Semaphore:
        key = id(edge)
        sem = self.slots.get(key)
        if sem is None:
            with self.graph_lock:
                sem = self.slots.setdefault(key, threading.Semaphore(edge.mode.queue_capacity))
        return sem

    def _enqueue(self, edge: Edge, frag: Fragment, ack: threading.Event | None = None) -> None:
        target = self.nodes[edge.dst]
        self._ensure_workers(target)
        sem = self._slot(edge) if edge.mode.is_async else None
        if sem is not None:
            sem.acquire()
        with self.cond:
            self.pending += 1
            self.resident += sem is not None
            self.peak_resident = max(self.peak_resident, self.resident)
        target.inbox.put((frag, sem, ack))

    def _worker(self, node: _Node) -> None:
        while True:
            item = node.inbox.get()
            if item is _STOP:
                return
            frag, sem, ack = item
            if sem is not None:
                sem.release()
                with self.cond:
                    self.resident -= 1
            try:
                self._execute(node.spec.id, frag)
            except BaseException as exc:  # engine bug; surface it from wait()
                self.failure = exc
                log.exception("worker for %s failed", node.spec.id)
            finally:
                if ack is not None:
                    ack.set()
                with self.cond:
                    self.pending -= 1
                    self.cond.notify_all()

    def _execute(self, nid: str, frag: Fragment) -> None:
        node = self.nodes[nid]
        with node.permit:
            forward = self._step(nid, frag)
            self._forward(node, forward)

    def _forward(self, node: _Node, forward) -> None:
        for edge, f in forward:
            if edge.mode.is_async:
                self._enqueue(edge, f)
            elif self.nodes[edge.dst].context != node.context:
                ack = threading.Event()
                self._enqueue(edge, f, ack)
                ack.wait()
            else:
                self._execute(edge.dst, f)

    def _feeder(self, nid: str, items: Iterable) -> None:
        try:
            for frag in as_fragments(items, nid):
                if self.cancel_event.is_set():
                    break
                self.consumed[nid] += 1
                self._execute(nid, frag)
        except BaseException as exc:
            self.failure = exc
            log.exception("feeding %s failed", nid)
        finally:
            with self.cond:
                self.pending -= 1
                self.cond.notify_all()

    def _quiesce(self) -> None:
        with self.cond:
            while self.pending:
                self.cond.wait()

    def start(self) -> None:
        if self.started:
            return
        self.started = True
        self.t0 = time.perf_counter()
        with self.cond:
            self.pending += len(self.feeds)
        for nid, items in self.feeds:
            threading.Thread(target=self._feeder, args=(nid, items), daemon=True,
                             name=f"feed/{nid}").start()
        threading.Thread(target=self._supervise, daemon=True, name="supervisor").start()

    def _supervise(self) -> None:
        try:
            self._quiesce()
            for nid in self._flush_order():
                node = self.nodes[nid]
                if node.processor is None:
                    continue
                with node.permit:
                    emissions = node.processor.flush()
                    if emissions:
                        self._forward(node, self._deliver(nid, emissions))
                self._quiesce()
            for node in list(self.nodes.values()):
                for _ in node.workers:
                    node.inbox.put(_STOP)
            self.report.peak_resident = self.peak_resident
            self.result = self._finish(self.t0)
        except BaseException as exc:
            self.failure = exc
        finally:
            self.finished.set()


class RunHandle:
    """Handle on a multi-task run; safe to share between threads."""

    def __init__(self, engine: ThreadedEngine):
        self._engine = engine
        self._lock = threading.Lock()

    def start(self) -> RunHandle:
        with self._lock:
            self._engine.start()
        return self

    @property
    def done(self) -> bool:
        return self._engine.finished.is_set()

    def cancel(self) -> RunReport:
        """Stop consuming source fragments, drain what is in flight, return the report."""
        with self._lock:
            if not self._engine.started:
                self._engine.cancel_event.set()
                self._engine.started = True
                self._engine.t0 = time.perf_counter()
                self._engine.result = self._engine._finish(self._engine.t0)
                self._engine.finished.set()
                return self._engine.result
            if not self.done:
                self._engine.cancel_event.set()
        return self.wait()

    def wait(self, timeout: float | None = None) -> RunReport:
        if not self._engine.finished.wait(timeout):
            raise TimeoutError("run still in progress")
        if self._engine.failure is not None:
            raise self._engine.failure
        return self._engine.result


def submit(graph: StreamGraph, config: RunConfig = RunConfig(), inputs: Mapping[str, Iterable] | None = None,
           sinks: Mapping[str, Callable[[Fragment], None]] | None = None, reactives=None) -> RunHandle:
    """Prepare a multi-task run without starting it."""
    return RunHandle(ThreadedEngine(graph, config, inputs or {}, sinks, reactives))


def oracle_run(graph: StreamGraph, config: RunConfig = RunConfig(), inputs: Mapping[str, Iterable] | None = None,
               sinks: Mapping[str, Callable[[Fragment], None]] | None = None, reactives=None) -> RunReport:
    config = replace(config, mode=ExecMode.SINGLE_TASK_ORACLE)
    return OracleEngine(graph, config, inputs or {}, sinks, reactives).execute()


def run(graph: StreamGraph, config: RunConfig = RunConfig(), inputs: Mapping[str, Iterable] | None = None,
        sinks: Mapping[str, Callable[[Fragment], None]] | None = None, reactives=None) -> RunReport:
    """Run to completion in the mode named by ``config``."""
    if config.mode is ExecMode.SINGLE_TASK_ORACLE:
        return oracle_run(graph, config, inputs, sinks, reactives)
    return submit(graph, config, inputs, sinks, reactives).start().wait()


def cancel(handle: RunHandle) -> RunReport:
    return handle.cancel()
