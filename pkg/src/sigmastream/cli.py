"""``sigma`` command line.

Exit codes: 0 success, 1 user error (bad input, unknown id, failed check),
2 internal error. ``--json`` switches every command to one machine-readable
record on standard output.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import io
import json
import os
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from . import dsl
from .contributions import Registry, RegistryError
from .distribution import assign_spaces, parse_plan
from .endpoints import EndpointError, open_source, write_dataset
from .graph import Fragment, GraphError
from .metamodel import MetamodelError, execute, register_simulation, replay
from .runtime import ExecMode, RunConfig, RunError
from .simulation import (
    Environment,
    SimulationError,
    YieldUntil,
    des_run,
    scale_time,
    timed_source,
    trace_digest,
    write_trace,
)

REGISTRY_ENV = "SIGMA_REGISTRY"
DEFAULT_REGISTRY = ".sigma-registry"
MODELS = Path(__file__).with_name("models")
EXAMPLES = {
    "crossover": ("crossover.sigma", "run"),
    "plasticity": ("plasticity.sigma", "simulate"),
}


class UserError(Exception):
    """Reported on standard error with exit code 1."""


USER_ERRORS = (UserError, dsl.DslError, GraphError, RegistryError, MetamodelError, SimulationError,
               EndpointError, RunError, FileNotFoundError, IsADirectoryError)


@dataclass
class Output:
    record: dict
    text: str


# -- helpers ---------------------------------------------------------------------


def _registry(args) -> Registry:
    root = args.registry or os.environ.get(REGISTRY_ENV) or DEFAULT_REGISTRY
    return Registry(root)


def _load_model(path: str) -> tuple[dsl.ModelDocument, Path]:
    p = Path(path)
    if not p.is_file():
        raise UserError(f"{path}: file not found")
    text = p.read_text(encoding="utf-8")
    try:
        return dsl.parse(text), p
    except dsl.DslError as exc:
        raise UserError(f"{path}:{exc}") from None


def _parse_pairs(pairs: Sequence[str] | None, flag: str) -> dict[str, str]:
    out = {}
    for item in pairs or ():
        name, sep, value = item.partition("=")
        if not sep or not name:
            raise UserError(f"{flag} expects NAME=PATH, got {item!r}")
        out[name] = value
    return out


def _source_endpoints(doc: dsl.ModelDocument) -> list[str]:
    return [doc.graph.node(s).params.get("endpoint", s) for s in doc.graph.sources]


def _load_inputs(doc: dsl.ModelDocument, model: Path, overrides: dict[str, str]) -> dict[str, list[Fragment]]:
    feeds = {}
    for name in _source_endpoints(doc):
        if name in overrides:
            path = Path(overrides[name])
        elif name in doc.bindings:
            path = model.parent / doc.bindings[name]
        else:
            raise UserError(f"source {name!r} has no dataset; bind it in the model or pass --input {name}=PATH")
        src = open_source(path)
        feeds[name] = list(src)
        for r in src.rejected:
            print(f"warning: {path}:{r.line}: rejected row: {r.message}", file=sys.stderr)
    return feeds


def _setting(cli_value, doc: dsl.ModelDocument, name: str, default=None):
    if cli_value is not None:
        return cli_value
    return doc.directives.get(name, default)


def _config(args, doc: dsl.ModelDocument, oracle: bool = False) -> RunConfig:
    seed = int(_setting(args.seed, doc, "seed", 0))
    pool = int(_setting(getattr(args, "pool", None), doc, "pool", 1))
    mode_name = _setting("oracle" if oracle or getattr(args, "oracle", False) else None, doc, "mode", "multi")
    mode = ExecMode.SINGLE_TASK_ORACLE if mode_name == "oracle" else ExecMode.MULTI_TASK
    deployment = None
    if getattr(args, "plan", None):
        plan = Path(args.plan)
        if not plan.is_file():
            raise UserError(f"{args.plan}: file not found")
        deployment = assign_spaces(doc.graph, parse_plan(plan.read_text(encoding="utf-8")))
    try:
        return RunConfig(pool_size=pool, seed=seed, mode=mode, deployment=deployment)
    except ValueError as exc:
        raise UserError(str(exc)) from None


def _write_outputs(doc: dsl.ModelDocument, outputs: dict[str, list[Fragment]], out_dir: Path | None) -> dict[str, str]:
    if out_dir is None:
        return {}
    paths = {}
    for endpoint, frags in sorted(outputs.items()):
        path = out_dir / doc.bindings.get(endpoint, f"{endpoint}.csv")
        sink = write_dataset(path, frags)
        for r in sink.rejected:
            print(f"warning: {path}: row {r.line} not written: {r.message}", file=sys.stderr)
        paths[endpoint] = str(path)
    return paths


def _output_table(execution, paths: dict[str, str]) -> dict[str, dict]:
    rec = execution.record
    return {
        name: {
            "id": rec.output_ids.get(name),
            "count": len(execution.report.outputs.get(name, [])),
            "digest": rec.output_digests.get(name),
            "path": paths.get(name),
        }
        for name in sorted(execution.report.outputs)
    }


def _run_lines(title: str, record: dict) -> list[str]:
    lines = [f"{title} {record['execution']}", f"config   {record['config']}", f"seed     {record['seed']}",
             f"mode     {record['mode']}"]
    for name, o in record["outputs"].items():
        where = f" -> {o['path']}" if o["path"] else ""
        lines.append(f"output   {name}: {o['count']} fragments, sha256 {o['digest'][:16]}{where}")
        lines.append(f"         id {o['id']}")
    if record.get("branches"):
        lines.append("branches " + ", ".join(record["branches"]))
    if record.get("errors"):
        lines.append(f"errors   {len(record['errors'])}")
    return lines


# -- commands ---------------------------------------------------------------------


def cmd_run(args) -> Output:
    doc, model = _load_model(args.model)
    config = _config(args, doc)
    feeds = _load_inputs(doc, model, _parse_pairs(args.input, "--input"))
    registry = _registry(args)
    execution = execute(doc.graph, config, feeds, registry, args.principal, model.stem,
                        reactives=doc.reactive_graph() if doc.formulas else None)
    out_dir = Path(args.out) if args.out else None
    paths = _write_outputs(doc, execution.report.outputs, out_dir)
    report = execution.report
    record = {
        "command": "run",
        "model": str(model),
        "execution": execution.record.id,
        "config": execution.record.config_version,
        "seed": config.seed,
        "mode": config.mode.value,
        "outputs": _output_table(execution, paths),
        "output_digest": report.output_digest(),
        "branches": sorted(report.branches),
        "errors": [[e.node, e.source_seq, e.message] for e in report.errors],
        "fuel_exhausted": report.fuel_exhausted,
    }
    return Output(record, "\n".join(_run_lines("execution", record)))


def cmd_simulate(args) -> Output:
    doc, model = _load_model(args.model)
    scale = _setting(args.scale, doc, "scale")
    period = _setting(args.period, doc, "period")
    if args.scale is not None and args.period is not None:
        raise UserError("give either --scale or --period, not both")
    if args.scale is not None:
        period = None
    elif args.period is not None:
        scale = None
    if scale is not None and period is not None:
        raise UserError("the model sets both scale and period; override one on the command line")
    t0 = int(_setting(args.t0, doc, "t0", 0))
    config = _config(args, doc, oracle=True)
    feeds = _load_inputs(doc, model, _parse_pairs(args.input, "--input"))
    if period is not None:
        feeds = {k: list(timed_source(v, int(period))) for k, v in feeds.items()}
        if t0:
            feeds = {k: scale_time(v, t0, 1) for k, v in feeds.items()}
    else:
        feeds = {k: scale_time(v, t0, scale if scale is not None else 1) for k, v in feeds.items()}

    last = max((f.event_time for v in feeds.values() for f in v), default=t0)
    horizon = int(_setting(args.horizon, doc, "horizon", last + 1))
    env = Environment(config.seed, start=min([t0, *(f.event_time for v in feeds.values() for f in v)]))
    for name, frags in feeds.items():
        env.add_agent(f"feed:{name}", _feeder(frags))
    trace = des_run(env, horizon, config.seed)
    delivered = {k: [f for f in v if f.event_time < horizon] for k, v in feeds.items()}

    registry = _registry(args)
    execution = execute(doc.graph, config, delivered, registry, args.principal, model.stem,
                        reactives=doc.reactive_graph() if doc.formulas else None)
    out_dir = Path(args.out) if args.out else None
    paths = _write_outputs(doc, execution.report.outputs, out_dir)
    trace_path = None
    if out_dir is not None or args.trace:
        trace_path = Path(args.trace) if args.trace else out_dir / "trace.tsv"
        trace_path.parent.mkdir(parents=True, exist_ok=True)
        write_trace(trace, trace_path)
    record = {
        "command": "simulate",
        "model": str(model),
        "execution": execution.record.id,
        "config": execution.record.config_version,
        "seed": config.seed,
        "mode": config.mode.value,
        "scale": None if scale is None else str(scale),
        "period": period,
        "t0": t0,
        "horizon": horizon,
        "trace_events": len(trace),
        "last_time": trace[-1].time if trace else None,
        "trace_digest": trace_digest(trace),
        "trace": None if trace_path is None else str(trace_path),
        "outputs": _output_table(execution, paths),
        "branches": sorted(execution.report.branches),
        "errors": [[e.node, e.source_seq, e.message] for e in execution.report.errors],
    }
    if args.register:
        benchmark = _benchmark(args.benchmark, execution)
        descriptor = {"scale": record["scale"], "period": period, "t0": t0, "seed": config.seed}
        reg = register_simulation(registry, execution.record.processor_ids[0],
                                  [(descriptor, execution.record.id)], benchmark)
        record["simulation"] = reg.id
    lines = _run_lines("execution", record)
    lines.insert(1, f"trace    {record['trace_events']} events, last at {record['last_time']}, "
                    f"sha256 {record['trace_digest'][:16]}" + (f" -> {trace_path}" if trace_path else ""))
    if "simulation" in record:
        lines.append(f"simulation {record['simulation']}")
    return Output(record, "\n".join(lines))


def _feeder(frags: list[Fragment]):
    def behavior(ctx):
        for f in frags:
            yield YieldUntil(max(f.event_time, ctx.now))

    return behavior


def _benchmark(spec: str | None, execution) -> dict:
    outputs = execution.report.outputs
    if spec:
        sink, sep, fld = spec.partition(".")
        if not sep:
            raise UserError("--benchmark expects SINK.FIELD")
        return {"sink": sink, "field": fld}
    for sink in sorted(outputs):
        for f in outputs[sink]:
            for k, v in f.payload.items():
                if not isinstance(v, (str, bool)):
                    return {"sink": sink, "field": k}
    raise UserError("no numeric output to benchmark; pass --benchmark SINK.FIELD")


def cmd_replay(args) -> Output:
    registry = _registry(args)
    result = replay(args.execution, registry)
    record = {
        "command": "replay",
        "execution": result.record_id,
        "match": result.match,
        "deterministic": result.deterministic,
        "ok": result.ok,
        "digests": {k: hashlib.sha256(v).hexdigest() for k, v in sorted(result.outputs.items())},
    }
    verdict = {"exact": "MATCH", "multiset": "MATCH (as multiset)", "mismatch": "MISMATCH"}[result.match]
    lines = [f"{verdict} {result.record_id}"]
    lines += [f"  {k}: {d}" for k, d in record["digests"].items()]
    out = Output(record, "\n".join(lines))
    if not result.ok:
        raise _Failed(out)
    return out


def cmd_registry_list(args) -> Output:
    registry = _registry(args)
    items = []
    for cid in registry.ids(args.classification):
        c = registry.contribution(cid)
        items.append({"id": cid, "classification": c.classification, "name": c.name,
                      "version": c.version, "owner": c.owner})
    records = registry.record_keys() if args.records else []
    lines = [f"{i['id']}\t{i['classification']}\t{i['owner']}" for i in items] + records
    return Output({"command": "registry list", "contributions": items, "records": records}, "\n".join(lines))


def cmd_registry_show(args) -> Output:
    registry = _registry(args)
    ident = args.id
    if ident.startswith(("exec:", "sim:")):
        body = registry.get_record(ident)
        return Output({"command": "registry show", "id": ident, "record": body},
                      json.dumps(body, indent=1, sort_keys=True))
    c = registry.contribution(ident)
    info = {
        "id": c.id,
        "classification": c.classification,
        "name": c.name,
        "version": c.version,
        "owner": c.owner,
        "blob": c.blob,
        "encoding": c.encoding,
        "access": {k: sorted(r.value for r in v) for k, v in sorted(c.access.items())},
        "provenance": [
            {"actor": e.actor, "action": e.action.value, "time": e.time, "related": list(e.related), "note": e.note}
            for e in c.provenance
        ],
    }
    lines = [f"{k:<15}{info[k]}" for k in ("id", "classification", "name", "version", "owner", "blob")]
    lines += [f"provenance     {e['time']} {e['action']} by {e['actor']} {' '.join(e['related'])}".rstrip()
              for e in info["provenance"]]
    return Output({"command": "registry show", **info}, "\n".join(lines))


def cmd_registry_provenance(args) -> Output:
    registry = _registry(args)
    chain = registry.provenance_chain(args.id)
    tree = registry.provenance_tree(args.id)
    entries = [{"id": cid, "classification": registry.contribution(cid).classification} for cid in chain]
    return Output({"command": "registry provenance", "id": args.id, "chain": entries,
                   "depth": registry.provenance_depth(args.id)}, tree.rstrip("\n"))


def cmd_validate(args) -> Output:
    path = Path(args.model)
    if not path.is_file():
        raise UserError(f"{args.model}: file not found")
    try:
        doc = dsl.parse(path.read_text(encoding="utf-8"))
    except dsl.DslError as exc:
        record = {"command": "validate", "model": args.model, "valid": False, "line": exc.line,
                  "column": exc.col, "message": exc.message, "expected": list(exc.expected)}
        raise _Failed(Output(record, f"{args.model}:{exc}"))
    record = {
        "command": "validate",
        "model": args.model,
        "valid": True,
        "nodes": len(doc.graph.nodes),
        "edges": len(doc.graph.edges),
        "sources": _source_endpoints(doc),
        "sinks": [doc.graph.node(s).params.get("endpoint", s) for s in doc.graph.sinks],
        "formulas": [n for n, _ in doc.formulas],
    }
    text = (f"{args.model}: ok, {record['nodes']} nodes, {record['edges']} edges, "
            f"{len(record['formulas'])} formulas")
    return Output(record, text)


def cmd_fmt(args) -> Output:
    doc, path = _load_model(args.model)
    text = dsl.format(doc)
    original = path.read_text(encoding="utf-8")
    changed = text != original
    if args.write and changed:
        path.write_text(text, encoding="utf-8")
    record = {"command": "fmt", "model": args.model, "changed": changed, "text": text}
    if args.check:
        out = Output(record, f"{args.model}: {'needs formatting' if changed else 'ok'}")
        if changed:
            raise _Failed(out)
        return out
    return Output(record, f"{args.model}: {'reformatted' if changed else 'unchanged'}" if args.write
                  else text.rstrip("\n"))


def cmd_example(args) -> Output:
    if args.name is None:
        names = sorted(EXAMPLES)
        return Output({"command": "example", "examples": names}, "\n".join(names))
    if args.name not in EXAMPLES:
        raise UserError(f"unknown example {args.name!r}; choose from {', '.join(sorted(EXAMPLES))}")
    model, command = EXAMPLES[args.name]
    if args.copy:
        dest = Path(args.copy)
        dest.mkdir(parents=True, exist_ok=True)
        copied = []
        for f in sorted(MODELS.iterdir()):
            if f.suffix in (".sigma", ".csv"):
                shutil.copy(f, dest / f.name)
                copied.append(str(dest / f.name))
        return Output({"command": "example", "copied": copied}, "\n".join(copied))
    ns = argparse.Namespace(**vars(args))
    ns.model = str(MODELS / model)
    for name, default in (("scale", None), ("period", None), ("t0", None), ("horizon", None), ("trace", None),
                          ("register", False), ("benchmark", None), ("pool", None), ("plan", None),
                          ("oracle", False), ("input", None)):
        if not hasattr(ns, name):
            setattr(ns, name, default)
    return cmd_simulate(ns) if command == "simulate" else cmd_run(ns)


class _Failed(Exception):
    """A command ran but its verdict is negative; print the output and exit 1."""

    def __init__(self, output: Output):
        super().__init__(output.text)
        self.output = output


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS,
                        help="print one machine-readable JSON record")
    common.add_argument("--registry", default=argparse.SUPPRESS, help=f"registry directory (default ${REGISTRY_ENV} or {DEFAULT_REGISTRY})")

    p = argparse.ArgumentParser(prog="sigma", description="Run and inspect dataflow models.", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    def execution_flags(sp):
        sp.add_argument("--seed", type=int, help="master seed (overrides 'set seed')")
        sp.add_argument("--out", help="directory for sink datasets")
        sp.add_argument("--input", action="append", metavar="NAME=PATH", help="dataset for a source endpoint")
        sp.add_argument("--principal", default="user", help="actor recorded in provenance")

    r = sub.add_parser("run", parents=[common], help="execute a model")
    r.add_argument("model")
    execution_flags(r)
    r.add_argument("--pool", type=int, help="pool size for stateless processors")
    r.add_argument("--oracle", action="store_true", help="single-task oracle mode")
    r.add_argument("--plan", help="deployment plan file")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("simulate", parents=[common], help="drive a model through virtual time")
    s.add_argument("model")
    execution_flags(s)
    s.add_argument("--scale", type=_positive_number, help="time scaling factor k > 0")
    s.add_argument("--period", type=_positive_int, help="emit source rows every T time units")
    s.add_argument("--t0", type=int, help="virtual start time")
    s.add_argument("--horizon", type=int, help="stop before this virtual time")
    s.add_argument("--trace", help="trace file (default OUT/trace.tsv)")
    s.add_argument("--register", action="store_true", help="store a simulation registration")
    s.add_argument("--benchmark", metavar="SINK.FIELD", help="benchmark output for --register")
    s.set_defaults(func=cmd_simulate)

    rp = sub.add_parser("replay", parents=[common], help="re-execute a recorded run and compare")
    rp.add_argument("execution")
    rp.set_defaults(func=cmd_replay)

    reg = sub.add_parser("registry", parents=[common], help="inspect the contribution registry")
    rsub = reg.add_subparsers(dest="registry_command", required=True)
    rl = rsub.add_parser("list", parents=[common], help="list contributions")
    rl.add_argument("--classification", help="filter by classification")
    rl.add_argument("--records", action="store_true", help="also list execution and simulation records")
    rl.set_defaults(func=cmd_registry_list)
    rs = rsub.add_parser("show", parents=[common], help="show one contribution or record")
    rs.add_argument("id")
    rs.set_defaults(func=cmd_registry_show)
    rv = rsub.add_parser("provenance", parents=[common], help="print the provenance tree")
    rv.add_argument("id")
    rv.set_defaults(func=cmd_registry_provenance)

    v = sub.add_parser("validate", parents=[common], help="parse and check a model")
    v.add_argument("model")
    v.set_defaults(func=cmd_validate)

    f = sub.add_parser("fmt", parents=[common], help="print a model in canonical layout")
    f.add_argument("model")
    group = f.add_mutually_exclusive_group()
    group.add_argument("--check", action="store_true", help="exit 1 when the file is not canonical")
    group.add_argument("--write", action="store_true", help="rewrite the file in place")
    f.set_defaults(func=cmd_fmt)

    e = sub.add_parser("example", parents=[common], help="run a bundled example")
    e.add_argument("name", nargs="?", help="example name; omit to list")
    execution_flags(e)
    e.add_argument("--copy", metavar="DIR", help="copy the bundled models and data to DIR instead")
    e.set_defaults(func=cmd_example)
    return p


def _positive_number(text: str):
    try:
        value = int(text)
    except ValueError:
        try:
            value = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return value


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return value


def _emit(output: Output, as_json: bool, stream=None) -> None:
    stream = stream or sys.stdout
    if as_json:
        stream.write(json.dumps(output.record, sort_keys=True, default=str) + "\n")
    elif output.text:
        stream.write(output.text + "\n")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    args.json = getattr(args, "json", False)
    args.registry = getattr(args, "registry", None)
    try:
        _emit(args.func(args), args.json)
        return 0
    except _Failed as failed:
        _emit(failed.output, args.json)
        return 1
    except USER_ERRORS as exc:
        msg = str(exc)
        if args.json:
            _emit(Output({"command": args.command, "error": msg}, ""), True)
        print(f"sigma: error: {msg}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        print(f"sigma: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def run_cli(argv: Sequence[str]) -> tuple[int, Any]:
    """Invoke ``main`` and return ``(exit code, parsed --json record or None)``; for tests and scripts."""
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main(list(argv))
    text = buf.getvalue()
    if "--json" in argv and text.strip():
        return code, json.loads(text.strip().splitlines()[-1])
    return code, text
