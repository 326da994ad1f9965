"""Registry of shareable artifacts: identity, classification, provenance, ownership.

Layout of a registry directory::

    log.jsonl        append-only, one compact JSON record per line
    blobs/<sha256>   artifact bytes, content addressed

The in-memory index is rebuilt by replaying the log, so closing and
reopening a registry gives back exactly the same state.

Ids look like ``sigma://local/Processor/Handler/ewma@2+1a2b3c4d5e6f``:
scheme, authority, classification path, name, version, and the first 12 hex
digits of the content hash.
"""
from __future__ import annotations

import hashlib
import json
import re
import threading
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from .graph import canonical_json


class RegistryError(ValueError):
    pass


class AccessDenied(RegistryError):
    pass


LEAVES = (
    "FinancialModel",
    "Processor/Handler",
    "Processor/Connector",
    "Processor/Modifier",
    "Processor/Reactive",
    "Processor/Agent",
    "Endpoint/Visualization/Plot",
    "Endpoint/Visualization/Animation",
    "Endpoint/Dataset",
)
INTERIOR = ("Processor", "Endpoint", "Endpoint/Visualization")
_SHORT = {leaf.rsplit("/", 1)[-1]: leaf for leaf in LEAVES}


def classify(name: str) -> str:
    """Resolve a classification to its full leaf path; interior nodes are rejected."""
    if name in LEAVES:
        return name
    if name in INTERIOR:
        raise RegistryError(f"{name!r} is not a leaf classification")
    if name in _SHORT:
        return _SHORT[name]
    raise RegistryError(f"unknown classification {name!r}")


class Right(str, Enum):
    READ = "Read"
    USE = "Use"
    DERIVE = "Derive"


class Action(str, Enum):
    CREATED = "Created"
    DERIVED = "Derived"
    USED = "Used"
    TRANSFERRED = "Transferred"


@dataclass(frozen=True)
class ProvenanceEntry:
    actor: str
    action: Action
    time: str
    related: tuple[str, ...] = ()
    note: str = ""


@dataclass
class Contribution:
    id: str
    classification: str
    name: str
    version: int
    owner: str
    blob: str
    encoding: str
    provenance: list[ProvenanceEntry] = field(default_factory=list)
    access: dict[str, set[Right]] = field(default_factory=dict)

    @property
    def parents(self) -> list[str]:
        return [p for e in self.provenance if e.action is Action.DERIVED for p in e.related]


_NAME = re.compile(r"[A-Za-z0-9_.\-\[\]]+")
_ID = re.compile(r"^sigma://(?P<auth>[^/]+)/(?P<cls>.+)/(?P<name>[^/@]+)@(?P<ver>\d+)\+(?P<hash>[0-9a-f]{12})$")


def parse_id(cid: str) -> dict:
    m = _ID.match(cid)
    if not m:
        raise RegistryError(f"malformed contribution id {cid!r}")
    return m.groupdict()


def encode_artifact(artifact: Any) -> tuple[bytes, str]:
    if isinstance(artifact, bytes):
        return artifact, "bytes"
    if isinstance(artifact, str):
        return artifact.encode("utf-8"), "text"
    return canonical_json(artifact).encode("utf-8"), "json"


def decode_artifact(data: bytes, encoding: str) -> Any:
    if encoding == "bytes":
        return data
    if encoding == "text":
        return data.decode("utf-8")
    return json.loads(data)


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


class Registry:
    """File-backed registry. Writes go through one lock; reads use the in-memory index."""

    def __init__(self, root: str | Path, authority: str = "local", clock: Callable[[], str] = utc_now):
        self.root = Path(root)
        self.authority = authority
        self.clock = clock
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "blobs").mkdir(exist_ok=True)
        self.log_path = self.root / "log.jsonl"
        self.log_path.touch(exist_ok=True)
        self._lock = threading.RLock()
        self._items: dict[str, Contribution] = {}
        self._records: dict[str, dict] = {}
        with open(self.log_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    self._apply(json.loads(line))

    # -- log -------------------------------------------------------------------

    def _append(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True, separators=(",", ":"))
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
        self._apply(record)

    def _apply(self, r: dict) -> None:
        op = r["op"]
        if op == "register":
            c = Contribution(r["id"], r["classification"], r["name"], r["version"], r["owner"],
                             r["blob"], r["encoding"])
            self._items[c.id] = c
        elif op == "provenance":
            self._items[r["id"]].provenance.append(
                ProvenanceEntry(r["actor"], Action(r["action"]), r["time"], tuple(r["related"]), r.get("note", ""))
            )
        elif op == "grant":
            self._items[r["id"]].access[r["principal"]] = {Right(x) for x in r["rights"]}
        elif op == "owner":
            self._items[r["id"]].owner = r["owner"]
        elif op == "record":
            self._records[r["key"]] = r["body"]
        else:
            raise RegistryError(f"unknown log record {op!r}")

    def log_lines(self) -> list[str]:
        return self.log_path.read_text(encoding="utf-8").splitlines()

    # -- blobs -----------------------------------------------------------------

    def put_blob(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        path = self.root / "blobs" / digest
        if not path.exists():
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(data)
            tmp.replace(path)
        return digest

    def get_blob(self, digest: str) -> bytes:
        path = self.root / "blobs" / digest
        if not path.exists():
            raise RegistryError(f"missing blob {digest}")
        return path.read_bytes()

    # -- contributions ---------------------------------------------------------

    def __contains__(self, cid: str) -> bool:
        return cid in self._items

    def __len__(self) -> int:
        return len(self._items)

    def ids(self, classification: str | None = None) -> list[str]:
        leaf = classify(classification) if classification else None
        return [cid for cid, c in self._items.items() if leaf is None or c.classification == leaf]

    def contribution(self, cid: str) -> Contribution:
        try:
            return self._items[cid]
        except KeyError:
            raise RegistryError(f"unknown contribution {cid!r}") from None

    def get(self, cid: str) -> Any:
        c = self.contribution(cid)
        return decode_artifact(self.get_blob(c.blob), c.encoding)

    def find_by_hash(self, digest: str) -> list[str]:
        """Contributions whose content hash is ``digest``; detects identical re-registrations."""
        return [cid for cid, c in self._items.items() if c.blob == digest]

    def _next_version(self, leaf: str, name: str) -> int:
        return 1 + sum(1 for c in self._items.values() if c.classification == leaf and c.name == name)

    def register(self, artifact: Any, classification: str, owner: str, name: str = "artifact",
                 version: int | None = None) -> str:
        leaf = classify(classification)
        if not _NAME.fullmatch(name):
            raise RegistryError(f"bad contribution name {name!r}")
        data, encoding = encode_artifact(artifact)
        with self._lock:
            digest = self.put_blob(data)
            if version is None:
                version = self._next_version(leaf, name)
            cid = f"sigma://{self.authority}/{leaf}/{name}@{version}+{digest[:12]}"
            if cid in self._items:
                raise RegistryError(f"duplicate contribution id {cid}")
            self._append({"op": "register", "id": cid, "classification": leaf, "name": name,
                          "version": version, "owner": owner, "blob": digest, "encoding": encoding})
            self._provenance(cid, owner, Action.CREATED)
        return cid

    def _provenance(self, cid: str, actor: str, action: Action, related: Iterable[str] = (), note: str = "") -> None:
        self._append({"op": "provenance", "id": cid, "actor": actor, "action": action.value,
                      "time": self.clock(), "related": list(related), "note": note})

    # -- access ----------------------------------------------------------------

    def verify_access(self, principal: str, cid: str, right: Right | str) -> bool:
        c = self.contribution(cid)
        right = Right(right)
        return principal == c.owner or right in c.access.get(principal, ())

    def require(self, principal: str, cid: str, right: Right | str) -> None:
        if not self.verify_access(principal, cid, right):
            raise AccessDenied(f"{principal} lacks {Right(right).value} on {cid}")

    def grant(self, cid: str, principal: str, rights: Iterable[Right | str], actor: str) -> None:
        c = self.contribution(cid)
        if actor != c.owner:
            raise AccessDenied(f"only the owner of {cid} can grant rights")
        rights = sorted({Right(r).value for r in rights})
        with self._lock:
            self._append({"op": "grant", "id": cid, "principal": principal, "rights": rights})

    def transfer(self, cid: str, new_owner: str, actor: str) -> None:
        """Hand ownership over; recorded as a Transferred provenance entry."""
        c = self.contribution(cid)
        if actor != c.owner:
            raise AccessDenied(f"only the owner of {cid} can transfer it")
        with self._lock:
            self._append({"op": "owner", "id": cid, "owner": new_owner})
            self._provenance(cid, actor, Action.TRANSFERRED, note=f"to {new_owner}")

    # -- derivation ------------------------------------------------------------

    def ancestors(self, cid: str) -> set[str]:
        seen: set[str] = set()
        stack = list(self.contribution(cid).parents)
        while stack:
            p = stack.pop()
            if p not in seen:
                seen.add(p)
                stack.extend(self.contribution(p).parents)
        return seen

    def derive(self, parents: Iterable[str], artifact: Any = None, classification: str | None = None,
               actor: str = "", name: str = "artifact", child: str | None = None) -> str:
        """Record that a new artifact (or an existing ``child``) derives from ``parents``."""
        parents = list(dict.fromkeys(parents))
        if not parents:
            raise RegistryError("derive needs at least one parent")
        for p in parents:
            self.contribution(p)
            self.require(actor, p, Right.DERIVE)
        with self._lock:
            if child is None:
                if classification is None:
                    raise RegistryError("a new derived artifact needs a classification")
                child = self.register(artifact, classification, actor, name)
            else:
                self.contribution(child)
                for p in parents:
                    if p == child or child in self.ancestors(p):
                        raise RegistryError(f"deriving {child} from {p} would create a cycle")
            self._provenance(child, actor, Action.DERIVED, parents)
        return child

    def provenance(self, cid: str) -> list[ProvenanceEntry]:
        return list(self.contribution(cid).provenance)

    def provenance_chain(self, cid: str) -> list[str]:
        """``cid`` followed by every ancestor, breadth first."""
        out, seen, frontier = [cid], {cid}, [cid]
        while frontier:
            nxt = []
            for n in frontier:
                for p in self.contribution(n).parents:
                    if p not in seen:
                        seen.add(p)
                        out.append(p)
                        nxt.append(p)
            frontier = nxt
        return out

    def provenance_depth(self, cid: str) -> int:
        """Generations on the longest derivation path, counting ``cid`` itself."""
        memo: dict[str, int] = {}

        def depth(n: str) -> int:
            if n not in memo:
                memo[n] = 1 + max((depth(p) for p in self.contribution(n).parents), default=0)
            return memo[n]

        return depth(cid)

    def provenance_tree(self, cid: str) -> str:
        lines: list[str] = []

        def walk(n: str, level: int, path: frozenset) -> None:
            c = self.contribution(n)
            lines.append(f"{'  ' * level}{n} [{c.classification}]")
            if n in path:
                return
            for p in c.parents:
                walk(p, level + 1, path | {n})

        walk(cid, 0, frozenset())
        return "\n".join(lines) + "\n"

    def is_acyclic(self) -> bool:
        state: dict[str, int] = {}
        for root in self._items:
            if root in state:
                continue
            stack = [(root, iter(self._items[root].parents))]
            state[root] = 1
            while stack:
                node, it = stack[-1]
                p = next(it, None)
                if p is None:
                    state[node] = 2
                    stack.pop()
                elif state.get(p) == 1:
                    return False
                elif p not in state:
                    state[p] = 1
                    stack.append((p, iter(self._items[p].parents)))
        return True

    # -- runs ------------------------------------------------------------------

    def _resolve(self, ref: str, actor: str) -> str:
        if ref in self._items:
            return ref
        try:
            leaf = classify(parse_id(ref)["cls"])
        except RegistryError:
            leaf = "Endpoint/Dataset"
        warnings.warn(f"run referenced unregistered artifact {ref!r}; registering it", stacklevel=3)
        return self.register(ref, leaf, actor, name="unregistered")

    def record_use(self, report, actor: str, outputs: Mapping[str, bytes] | None = None) -> dict[str, str]:
        """Intrinsic provenance for a finished run.

        Inputs, processors and the configuration get a Used entry. Each entry
        of ``outputs`` (sink name to dataset bytes) is registered and marked
        as derived from all of them. Returns sink name to new id and fills
        ``report.output_ids``.
        """
        with self._lock:
            refs = [*report.input_ids, *report.processor_ids]
            if report.config_id:
                refs.append(report.config_id)
            used = [self._resolve(r, actor) for r in dict.fromkeys(refs)]
            for cid in used:
                self._provenance(cid, actor, Action.USED, note="run")
            made: dict[str, str] = {}
            for sink, data in sorted((outputs or {}).items()):
                cid = self.register(data, "Endpoint/Dataset", actor, name=sink)
                self._provenance(cid, actor, Action.DERIVED, used)
                made[sink] = cid
            report.output_ids = list(made.values())
        return made

    # -- stored records ----------------------------------------------------------

    def put_record(self, key: str, body: Mapping) -> None:
        with self._lock:
            if key in self._records:
                raise RegistryError(f"record {key} already exists")
            self._append({"op": "record", "key": key, "body": dict(body)})

    def get_record(self, key: str) -> dict:
        try:
            return self._records[key]
        except KeyError:
            raise RegistryError(f"unknown record {key!r}") from None

    def record_keys(self, prefix: str = "") -> list[str]:
        return [k for k in self._records if k.startswith(prefix)]
