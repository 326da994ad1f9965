"""Virtual time: timed and scaled sources, pacing clocks, and a discrete-event scheduler.

Virtual time is integer nanoseconds (or integer ticks). Scaling divides by a
rational factor and rounds half to even, so results never depend on float
precision.

Agents are generator functions that yield signals. The environment runs
one agent at a time until it yields; cooperative scheduling, no preemption.
"""
from __future__ import annotations

import hashlib
import heapq
import time
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Any, Callable, Generator, Iterable, Iterator, Mapping

from .graph import Fragment, StreamGraph
from .seeding import check_seed, derive_rng, derive_seed


class SimulationError(ValueError):
    pass


# -- time scaling ---------------------------------------------------------------


def _factor(k) -> Fraction:
    if isinstance(k, float):
        k = Fraction(repr(k))  # decimal reading, not the binary expansion
    k = Fraction(k)
    if k <= 0:
        raise SimulationError(f"scale factor must be > 0, got {k}")
    return k


def scale_instant(t: int, t0: int, k) -> int:
    """``t0 + t / k`` rounded half to even."""
    return t0 + round(Fraction(t) / _factor(k))


def unscale_instant(t_scaled: int, t0: int, k) -> int:
    """Inverse of :func:`scale_instant`, exact whenever ``t`` is a multiple of ``k``."""
    return round((Fraction(t_scaled) - t0) * _factor(k))


def scale_time(events: Iterable[Fragment], t0: int, k) -> list[Fragment]:
    """Re-time fragments; order and payloads are unchanged."""
    factor = _factor(k)
    return [replace(f, event_time=t0 + round(Fraction(f.event_time) / factor)) for f in events]


@dataclass
class ScaledSource:
    """Source re-timing a backing event stream by ``t0 + t/k``."""

    events: Iterable[Fragment]
    t0: int = 0
    k: Any = 1

    def __post_init__(self):
        self.factor = _factor(self.k)

    def __iter__(self) -> Iterator[Fragment]:
        for f in self.events:
            yield replace(f, event_time=self.t0 + round(Fraction(f.event_time) / self.factor))


@dataclass
class TimedSource:
    """Source emitting fragment ``n`` at virtual time ``n * period``."""

    dataset: Iterable
    period: int

    def __post_init__(self):
        if self.period <= 0:
            raise SimulationError(f"period must be > 0, got {self.period}")

    def __iter__(self) -> Iterator[Fragment]:
        for n, item in enumerate(self.dataset):
            if isinstance(item, Fragment):
                payload, source = item.payload, item.source
            else:
                payload, source = (item if isinstance(item, Mapping) else {"value": item}), ""
            yield Fragment(payload, event_time=n * self.period, source_seq=n, source=source)


def timed_source(dataset: Iterable, period: int) -> TimedSource:
    return TimedSource(dataset, period)


class Pacing(str, Enum):
    AS_FAST_AS_POSSIBLE = "AsFastAsPossible"
    WALL_CLOCK = "WallClock"


@dataclass
class SimClock:
    """Virtual clock. Under wall-clock pacing, one virtual second takes ``ratio`` real seconds."""

    pacing: Pacing = Pacing.AS_FAST_AS_POSSIBLE
    ratio: float = 1.0
    now: int = 0
    units_per_second: int = 1_000_000_000
    sleep: Callable[[float], None] = time.sleep

    def advance_to(self, t: int) -> None:
        if t < self.now:
            raise SimulationError(f"virtual time cannot go back from {self.now} to {t}")
        if self.pacing is Pacing.WALL_CLOCK and t > self.now:
            self.sleep((t - self.now) / self.units_per_second * self.ratio)
        self.now = t

    def pace(self, fragments: Iterable[Fragment]) -> Iterator[Fragment]:
        for f in fragments:
            self.advance_to(f.event_time)
            yield f


# -- discrete-event simulation -------------------------------------------------------


@dataclass(frozen=True)
class YieldFor:
    duration: int


@dataclass(frozen=True)
class YieldUntil:
    time: int


@dataclass(frozen=True)
class Acquire:
    """Take one unit of a resource; waits in FIFO order while it is full."""

    resource: str


YieldOnResource = Acquire


@dataclass(frozen=True)
class Release:
    resource: str


@dataclass(frozen=True)
class Cancel:
    reason: str = ""


Signal = YieldFor | YieldUntil | Acquire | Release | Cancel


class AgentStatus(str, Enum):
    ELIGIBLE = "Eligible"
    RUNNING = "Running"
    WAITING = "Waiting"
    CANCELLED = "Cancelled"


@dataclass(frozen=True)
class TraceRecord:
    time: int
    agent: str
    signal: str
    detail: str = ""

    def line(self) -> str:
        return f"{self.time}\t{self.agent}\t{self.signal}\t{self.detail}"


@dataclass
class AgentContext:
    """What an agent behavior sees: the clock, its seeded random source, its holdings."""

    env: Environment
    agent_id: str
    rng: Any
    seed: int

    @property
    def now(self) -> int:
        return self.env.now

    def holding(self, resource: str) -> int:
        return self.env.resources[resource].holders.count(self.agent_id)


Behavior = Callable[[AgentContext], Generator[Signal, Any, Any]]


@dataclass
class Agent:
    id: str
    behavior: Behavior
    status: AgentStatus = AgentStatus.ELIGIBLE
    process: Generator | None = None
    held: list[str] = field(default_factory=list)

    @classmethod
    def from_graph(cls, agent_id: str, graph: StreamGraph, period: int = 1) -> Agent:
        return cls(agent_id, graph_behavior(graph, period))


def signal_from(fragment: Fragment, period: int = 1) -> Signal:
    p = fragment.payload
    kind = p.get("signal", "yield_for")
    if kind == "yield_for":
        return YieldFor(int(p.get("duration", period)))
    if kind == "yield_until":
        return YieldUntil(int(p["until"]))
    if kind == "acquire":
        return Acquire(str(p["resource"]))
    if kind == "release":
        return Release(str(p["resource"]))
    if kind == "cancel":
        return Cancel(str(p.get("reason", "")))
    raise SimulationError(f"unknown signal {kind!r}")


def graph_behavior(graph: StreamGraph, period: int = 1) -> Behavior:
    """Play an agent with a stream graph.

    Each activation pushes one tick fragment into every source; the
    fragments reaching the sinks are read as signals, in sink order. An
    activation producing no signal yields for ``period``.
    """
    from .runtime import OracleEngine, RunConfig

    def behavior(ctx: AgentContext):
        engine = OracleEngine(graph, RunConfig(seed=ctx.seed), {s: [] for s in graph.sources}, None, None)
        outputs = engine.report.outputs
        tick = 0
        while True:
            before = {k: len(v) for k, v in outputs.items()}
            for nid in graph.sources:
                engine.push(nid, Fragment({"tick": tick, "now": ctx.now}, ctx.now, tick, nid))
            tick += 1
            fresh = [f for k in sorted(outputs) for f in outputs[k][before.get(k, 0):]]
            signals = [signal_from(f, period) for f in fresh] or [YieldFor(period)]
            for s in signals:
                yield s

    return behavior


@dataclass
class Resource:
    name: str
    capacity: int
    holders: list[str] = field(default_factory=list)
    waiters: deque = field(default_factory=deque)
    grants: int = 0
    releases: int = 0

    @property
    def occupancy(self) -> int:
        return len(self.holders)


class Environment:
    """Event queue ordered by ``(virtual time, insertion sequence)``."""

    def __init__(self, seed: int = 0, start: int = 0):
        check_seed(seed)
        self.seed = seed
        self.now = start
        self.agents: dict[str, Agent] = {}
        self.resources: dict[str, Resource] = {}
        self.trace: list[TraceRecord] = []
        self._queue: list[tuple[int, int, str]] = []
        self._seq = 0
        self.running: str | None = None

    def add_agent(self, agent: Agent | str, behavior: Behavior | None = None) -> Agent:
        if isinstance(agent, str):
            agent = Agent(agent, behavior)
        if agent.id in self.agents:
            raise SimulationError(f"duplicate agent {agent.id!r}")
        self.agents[agent.id] = agent
        return agent

    def add_resource(self, name: str, capacity: int) -> Resource:
        if capacity < 1:
            raise SimulationError("resource capacity must be >= 1")
        self.resources[name] = Resource(name, capacity)
        return self.resources[name]

    def _log(self, agent: str, signal: str, detail: str = "") -> None:
        self.trace.append(TraceRecord(self.now, agent, signal, detail))

    def _schedule(self, at: int, agent_id: str) -> None:
        heapq.heappush(self._queue, (at, self._seq, agent_id))
        self._seq += 1

    def _grant(self, res: Resource, agent: Agent) -> None:
        res.holders.append(agent.id)
        res.grants += 1
        agent.held.append(res.name)
        self._log(agent.id, "acquire", res.name)

    def _release(self, res: Resource, agent: Agent) -> None:
        res.holders.remove(agent.id)
        res.releases += 1
        agent.held.remove(res.name)
        self._log(agent.id, "release", res.name)
        while res.waiters and res.occupancy < res.capacity:
            waiter = self.agents[res.waiters.popleft()]
            if waiter.status is AgentStatus.CANCELLED:
                continue
            self._grant(res, waiter)
            waiter.status = AgentStatus.ELIGIBLE
            self._schedule(self.now, waiter.id)

    def _cancel(self, agent: Agent, signal: str, detail: str) -> None:
        for name in list(reversed(agent.held)):
            self._release(self.resources[name], agent)
        for res in self.resources.values():
            if agent.id in res.waiters:
                res.waiters.remove(agent.id)
        agent.status = AgentStatus.CANCELLED
        self._log(agent.id, signal, detail)
        if agent.process is not None:
            agent.process.close()

    def _resource(self, name: str) -> Resource:
        try:
            return self.resources[name]
        except KeyError:
            raise SimulationError(f"unknown resource {name!r}") from None

    def _run_agent(self, agent: Agent) -> None:
        """Advance one agent until it de-schedules itself or leaves."""
        if self.running is not None:
            raise SimulationError("two agents running at once")
        self.running = agent.id
        agent.status = AgentStatus.RUNNING
        self._log(agent.id, "activate")
        try:
            while True:
                try:
                    signal = next(agent.process)
                except StopIteration:
                    self._cancel(agent, "cancel", "finished")
                    return
                except Exception as exc:
                    self._log(agent.id, "fail", f"{type(exc).__name__}: {exc}")
                    self._cancel(agent, "cancel", "failed")
                    return
                try:
                    if self._apply(agent, signal):
                        return
                except SimulationError as exc:
                    self._log(agent.id, "fail", str(exc))
                    self._cancel(agent, "cancel", "failed")
                    return
        finally:
            self.running = None

    def _apply(self, agent: Agent, signal) -> bool:
        """Apply one signal; True when the agent is de-scheduled."""
        if isinstance(signal, YieldFor):
            if signal.duration < 0:
                raise SimulationError(f"negative yield duration {signal.duration}")
            agent.status = AgentStatus.WAITING
            self._log(agent.id, "yield_for", str(signal.duration))
            self._schedule(self.now + signal.duration, agent.id)
            return True
        if isinstance(signal, YieldUntil):
            if signal.time < self.now:
                raise SimulationError(f"yield_until {signal.time} is in the past")
            agent.status = AgentStatus.WAITING
            self._log(agent.id, "yield_until", str(signal.time))
            self._schedule(signal.time, agent.id)
            return True
        if isinstance(signal, Acquire):
            res = self._resource(signal.resource)
            if res.occupancy < res.capacity:
                self._grant(res, agent)
                return False
            agent.status = AgentStatus.WAITING
            res.waiters.append(agent.id)
            self._log(agent.id, "wait", res.name)
            return True
        if isinstance(signal, Release):
            res = self._resource(signal.resource)
            if agent.id not in res.holders:
                raise SimulationError(f"{agent.id} releases {res.name} without holding it")
            self._release(res, agent)
            return False
        if isinstance(signal, Cancel):
            self._cancel(agent, "cancel", signal.reason)
            return True
        raise SimulationError(f"not a signal: {signal!r}")

    def run(self, horizon: int) -> list[TraceRecord]:
        """Process events with virtual time strictly below ``horizon``."""
        if horizon <= 0:
            raise SimulationError("horizon must be > 0")
        if not self.agents:
            raise SimulationError("no agents registered")
        for agent in self.agents.values():
            if agent.process is None and agent.status is not AgentStatus.CANCELLED:
                seed = derive_seed(self.seed, agent.id)
                ctx = AgentContext(self, agent.id, derive_rng(self.seed, agent.id), seed)
                agent.process = agent.behavior(ctx)
                self._schedule(self.now, agent.id)
        while self._queue and self._queue[0][0] < horizon:
            at, _, agent_id = heapq.heappop(self._queue)
            agent = self.agents[agent_id]
            if agent.status is AgentStatus.CANCELLED:
                continue
            self.now = at
            self._run_agent(agent)
        return self.trace


def des_run(env: Environment, horizon: int, seed: int | None = None) -> list[TraceRecord]:
    if seed is not None:
        check_seed(seed)
        env.seed = seed
    return env.run(horizon)


def activations(trace: Iterable[TraceRecord]) -> list[int]:
    return [r.time for r in trace if r.signal == "activate"]


def trace_text(trace: Iterable[TraceRecord]) -> str:
    return "".join(r.line() + "\n" for r in trace)


def trace_digest(trace: Iterable[TraceRecord]) -> str:
    return hashlib.sha256(trace_text(trace).encode()).hexdigest()


def write_trace(trace: Iterable[TraceRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(trace_text(trace))


def read_trace(path) -> list[TraceRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            t, agent, signal, detail = line.rstrip("\n").split("\t", 3)
            out.append(TraceRecord(int(t), agent, signal, detail))
    return out
