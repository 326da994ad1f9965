"""Configuration snapshots, execution records, simulation registrations, replay.

Everything here is stored in a contribution registry: snapshots as
FinancialModel contributions, datasets as Dataset contributions, and
execution and simulation records as keyed log records.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace as dc_replace
from fractions import Fraction
from typing import Any, Iterable, Mapping, Sequence

from .contributions import Registry, RegistryError, Right, classify, encode_artifact
from .endpoints import decode_record_lines, encode_record_lines, type_of
from .graph import Fragment, StreamGraph, canonical_json
from .plasticity import GraphVersion
from .runtime import ExecMode, RunConfig, RunReport, as_fragments, run

EMPTY_GRAPH = StreamGraph()


class MetamodelError(ValueError):
    pass


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ConfigurationSnapshot:
    """Content plus its hash. The creation time is kept out of the hash."""

    content: str
    version_hash: str
    created: str = ""

    @property
    def id(self) -> str:
        return f"config:{self.version_hash}"

    def data(self) -> dict:
        return json.loads(self.content)


def snapshot(state: StreamGraph | GraphVersion | Sequence[GraphVersion], *, config: RunConfig | None = None,
             predicates: Mapping[str, list] | None = None, references: Iterable[str] = (),
             history: Sequence[str] = (), created: str = "") -> ConfigurationSnapshot:
    """Deterministic snapshot of a graph state.

    ``state`` may be a graph, one version, or a version chain (oldest
    first); a chain contributes its hashes to ``history``.
    """
    if isinstance(state, StreamGraph):
        graph, chain = state, list(history)
    elif isinstance(state, GraphVersion):
        graph, chain = state.graph, list(history) or [state.hash]
    else:
        versions = list(state)
        if not versions:
            raise MetamodelError("empty version chain")
        graph, chain = versions[-1].graph, [v.hash for v in versions]
    body = {
        "graph": graph.to_dict(),
        "history": chain,
        "predicates": {k: list(v) for k, v in sorted((predicates or {}).items())},
        "references": sorted(set(references)),
        "config": config_dict(config) if config else None,
    }
    content = canonical_json(body)
    return ConfigurationSnapshot(content, _sha(content), created)


def config_dict(config: RunConfig) -> dict:
    d = config.to_dict()
    d.pop("config_id", None)
    return d


def config_from(d: Mapping) -> RunConfig:
    return RunConfig(pool_size=d["pool_size"], seed=d["seed"], mode=ExecMode(d["mode"]),
                     pool_sizes=dict(d["pool_sizes"]), failure_threshold=d["failure_threshold"])


def diff_snapshots(a: ConfigurationSnapshot, b: ConfigurationSnapshot) -> dict:
    """Structural difference between two snapshots' graphs."""
    ga, gb = a.data()["graph"], b.data()["graph"]
    ids_a = {n["id"] for n in ga["nodes"]}
    ids_b = {n["id"] for n in gb["nodes"]}
    edge = lambda e: (e["src"], e["dst"], e["mode"], e["queue_capacity"])  # noqa: E731
    ea = {edge(e) for e in ga["edges"]}
    eb = {edge(e) for e in gb["edges"]}
    added = sorted(ids_b - ids_a)
    branches = sorted({n[n.index("[") + 1:-1] for n in added if "[" in n and n.endswith("]")})
    return {
        "added_nodes": added,
        "removed_nodes": sorted(ids_a - ids_b),
        "added_edges": sorted(eb - ea),
        "removed_edges": sorted(ea - eb),
        "added_branches": branches,
    }


# -- execution records ------------------------------------------------------------


def report_digest(report: RunReport) -> str:
    """Digest of the report without wall time, which never repeats."""
    record = report.to_record()
    record.pop("wall_time")
    return _sha(canonical_json(record))


def schema_of(outputs: Mapping[str, list[Fragment]]) -> dict[str, list[str]]:
    schema = {}
    for sink, frags in sorted(outputs.items()):
        cols: dict[str, str] = {}
        for f in frags:
            for k, v in f.payload.items():
                cols.setdefault(k, type_of(v))
        schema[sink] = [f"{k}:{t}" for k, t in cols.items()]
    return schema


def order_deterministic(graph: StreamGraph) -> bool:
    """True when every sink sees a fixed order under multi-task execution.

    Walking back from each sink over sync edges, every path must stop at a
    resequencer before meeting an async edge, and at most one source may be
    reached without one.
    """
    for sink in graph.sinks:
        sources, stack, seen = set(), [sink], set()
        while stack:
            n = stack.pop()
            if n in seen:
                continue
            seen.add(n)
            if graph.node(n).behavior == "resequence":
                continue
            if n in graph.sources:
                sources.add(n)
            for e in graph.in_edges(n):
                if e.mode.is_async:
                    return False
                stack.append(e.src)
        if len(sources) > 1:
            return False
    return True


@dataclass(frozen=True)
class ExecutionRecord:
    id: str
    config_version: str
    snapshot_hash: str
    schema: Mapping[str, list[str]]
    seed: int
    mode: str
    input_ids: Mapping[str, str]
    processor_ids: Sequence[str]
    output_ids: Mapping[str, str]
    report_digest: str
    output_digests: Mapping[str, str]
    deterministic: bool

    def body(self) -> dict:
        return {
            "config_version": self.config_version,
            "snapshot_hash": self.snapshot_hash,
            "schema": {k: list(v) for k, v in self.schema.items()},
            "seed": self.seed,
            "mode": self.mode,
            "input_ids": dict(self.input_ids),
            "processor_ids": list(self.processor_ids),
            "output_ids": dict(self.output_ids),
            "report_digest": self.report_digest,
            "output_digests": dict(self.output_digests),
            "deterministic": self.deterministic,
        }

    @classmethod
    def from_body(cls, rid: str, b: Mapping) -> ExecutionRecord:
        return cls(rid, **b)


@dataclass
class Execution:
    record: ExecutionRecord
    report: RunReport
    snapshot: ConfigurationSnapshot
    outputs: dict[str, bytes] = field(default_factory=dict)


def _register_once(registry: Registry, artifact: Any, classification: str, owner: str, name: str) -> str:
    """Reuse an existing contribution with the same content, class and name."""
    leaf = classify(classification)
    data, _ = encode_artifact(artifact)
    digest = hashlib.sha256(data).hexdigest()
    for cid in registry.find_by_hash(digest):
        c = registry.contribution(cid)
        if c.classification == leaf and c.name == name:
            return cid
    return registry.register(artifact, leaf, owner, name)


def _safe_name(text: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "_.-[]" else "_" for ch in text) or "x"


def execute(graph: StreamGraph, config: RunConfig, inputs: Mapping[str, Iterable | str], registry: Registry,
            principal: str, model_name: str = "model", reactives=None) -> Execution:
    """Run with full bookkeeping: contributions, snapshot, provenance, record."""
    model_id = _register_once(registry, graph.to_dict(), "FinancialModel", principal, _safe_name(model_name))
    processor_ids = [
        _register_once(registry, n.to_dict(), f"Processor/{n.kind.value}", principal, _safe_name(n.id))
        for n in graph.nodes
    ]
    input_ids: dict[str, str] = {}
    feeds: dict[str, list[Fragment]] = {}
    for name, src in sorted(inputs.items()):
        if isinstance(src, str):
            registry.require(principal, src, Right.USE)
            input_ids[name] = src
            feeds[name] = decode_record_lines(registry.get_blob(registry.contribution(src).blob))
        else:
            frags = list(as_fragments(src, name))
            input_ids[name] = _register_once(registry, encode_record_lines(frags), "Endpoint/Dataset",
                                             principal, _safe_name(name))
            feeds[name] = frags
    for cid in [model_id, *processor_ids]:
        registry.require(principal, cid, Right.USE)

    pre = snapshot(graph, config=config, references=[model_id, *processor_ids, *input_ids.values()])
    config_id = _register_once(registry, pre.data(), "FinancialModel", principal, _safe_name(model_name) + ".config")
    report = run(graph, dc_replace(config, config_id=config_id), feeds, reactives=reactives)
    report.input_ids = list(input_ids.values())
    report.processor_ids = [model_id, *processor_ids]

    outputs = {sink: encode_record_lines(frags) for sink, frags in report.outputs.items() if frags}
    output_ids = registry.record_use(report, principal, outputs)
    final = snapshot(graph, config=config, predicates=report.predicates, history=report.history,
                     references=[model_id, *processor_ids, *input_ids.values()])
    body = ExecutionRecord(
        id="",
        config_version=config_id,
        snapshot_hash=final.version_hash,
        schema=schema_of(report.outputs),
        seed=config.seed,
        mode=config.mode.value,
        input_ids=input_ids,
        processor_ids=[model_id, *processor_ids],
        output_ids=output_ids,
        report_digest=report_digest(report),
        output_digests={k: hashlib.sha256(v).hexdigest() for k, v in sorted(outputs.items())},
        deterministic=config.mode is ExecMode.SINGLE_TASK_ORACLE or order_deterministic(graph),
    ).body()
    rid = "exec:" + _sha(canonical_json(body) + str(len(registry.record_keys("exec:"))))
    registry.put_record(rid, body)
    return Execution(ExecutionRecord.from_body(rid, body), report, final, outputs)


@dataclass(frozen=True)
class ReplayResult:
    record_id: str
    report: RunReport
    outputs: dict[str, bytes]
    match: str  # "exact", "multiset" or "mismatch"
    deterministic: bool

    @property
    def ok(self) -> bool:
        return self.match == "exact" or (not self.deterministic and self.match == "multiset")


def load_record(registry: Registry, record_id: str) -> ExecutionRecord:
    try:
        return ExecutionRecord.from_body(record_id, registry.get_record(record_id))
    except RegistryError:
        raise MetamodelError(f"unknown execution record {record_id!r}") from None


def replay(record: ExecutionRecord | str, registry: Registry, reactives=None) -> ReplayResult:
    """Re-execute from the stored configuration and inputs, then compare outputs."""
    if isinstance(record, str):
        record = load_record(registry, record)
    if record.config_version not in registry:
        raise MetamodelError(f"unknown configuration version {record.config_version}")
    data = registry.get(record.config_version)
    graph = StreamGraph.from_dict(data["graph"])
    config = dc_replace(config_from(data["config"]), config_id=record.config_version)
    feeds = {}
    for name, cid in record.input_ids.items():
        if cid not in registry:
            raise MetamodelError(f"unknown input {cid}")
        feeds[name] = decode_record_lines(registry.get_blob(registry.contribution(cid).blob))
    report = run(graph, config, feeds, reactives=reactives)
    outputs = {sink: encode_record_lines(frags) for sink, frags in report.outputs.items() if frags}
    digests = {k: hashlib.sha256(v).hexdigest() for k, v in sorted(outputs.items())}
    if digests == dict(record.output_digests):
        match = "exact"
    else:
        originals = {k: registry.get_blob(registry.contribution(v).blob) for k, v in record.output_ids.items()}
        same = set(originals) == set(outputs) and all(
            sorted(originals[k].splitlines()) == sorted(outputs[k].splitlines()) for k in outputs
        )
        match = "multiset" if same else "mismatch"
    return ReplayResult(record.id, report, outputs, match, record.deterministic)


# -- simulation registrations ---------------------------------------------------------


@dataclass(frozen=True)
class Shock:
    descriptor: Mapping[str, Any]
    execution: str


@dataclass(frozen=True)
class SimulationRegistration:
    id: str
    model: str
    shocks: tuple[Shock, ...]
    benchmark: Mapping[str, Any]
    result: Mapping[str, Any]
    digest: str


def _metric_value(v) -> str:
    return str(v) if not isinstance(v, Fraction) else f"{v.numerator}/{v.denominator}"


def compute_benchmark(registry: Registry, shocks: Sequence[Shock], benchmark: Mapping[str, Any]) -> dict:
    """Summaries of one field of one sink, per shock: count, last, sum, mean."""
    sink, fld = benchmark.get("sink"), benchmark.get("field")
    if not sink or not fld:
        raise MetamodelError("benchmark needs 'sink' and 'field'")
    rows = []
    for s in shocks:
        rec = load_record(registry, s.execution)
        if sink not in rec.output_ids:
            raise MetamodelError(f"execution {s.execution} has no sink {sink!r}")
        frags = decode_record_lines(registry.get_blob(registry.contribution(rec.output_ids[sink]).blob))
        values = [f.payload[fld] for f in frags if fld in f.payload]
        numeric = [v for v in values if not isinstance(v, (str, bool))]
        total = sum(numeric, start=0)
        if not numeric:
            mean = None
        elif isinstance(total, int):
            mean = Fraction(total, len(numeric))
        else:
            mean = total / len(numeric)
        rows.append({
            "execution": s.execution,
            "count": len(values),
            "last": _metric_value(values[-1]) if values else None,
            "sum": _metric_value(total),
            "mean": _metric_value(mean) if mean is not None else None,
        })
    return {"sink": sink, "field": fld, "shocks": rows}


def register_simulation(registry: Registry, model: str, shocks: Sequence[tuple[Mapping, str] | Shock],
                        benchmark: Mapping[str, Any]) -> SimulationRegistration:
    shocks = tuple(s if isinstance(s, Shock) else Shock(dict(s[0]), s[1]) for s in shocks)
    if not shocks:
        raise MetamodelError("a simulation needs at least one shock")
    if model not in registry:
        raise MetamodelError(f"unknown model {model!r}")
    for s in shocks:
        load_record(registry, s.execution)
    result = compute_benchmark(registry, shocks, benchmark)
    digest = _sha(canonical_json(result))
    body = {
        "model": model,
        "shocks": [{"descriptor": dict(s.descriptor), "execution": s.execution} for s in shocks],
        "benchmark": dict(benchmark),
        "result": result,
        "digest": digest,
    }
    sid = "sim:" + _sha(canonical_json(body))
    registry.put_record(sid, body)
    return SimulationRegistration(sid, model, shocks, dict(benchmark), result, digest)


def load_simulation(registry: Registry, sid: str) -> SimulationRegistration:
    try:
        b = registry.get_record(sid)
    except RegistryError:
        raise MetamodelError(f"unknown simulation {sid!r}") from None
    shocks = tuple(Shock(s["descriptor"], s["execution"]) for s in b["shocks"])
    return SimulationRegistration(sid, b["model"], shocks, b["benchmark"], b["result"], b["digest"])


def recompute_benchmark(registry: Registry, reg: SimulationRegistration | str) -> bool:
    if isinstance(reg, str):
        reg = load_simulation(registry, reg)
    result = compute_benchmark(registry, reg.shocks, reg.benchmark)
    return _sha(canonical_json(result)) == reg.digest
