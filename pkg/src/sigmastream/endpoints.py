"""Dataset, plot and animation endpoints.

Two dataset formats, both streamed row by row:

* DelimitedText (``.csv``): comma separated, one header row, RFC 4180
  quoting, ``\\n`` line ends. Payload columns are named ``field:type`` with
  type one of int, float, decimal, text, bool, time. The untyped columns
  ``source_seq``, ``event_time``, ``source``, ``loops`` and ``lane`` carry
  fragment metadata. All are optional when reading: ``source_seq``
  defaults to the accepted-row number, ``event_time`` to ``source_seq``,
  the rest to empty or zero.
* RecordLines (``.jsonl``): one compact JSON object per line holding the
  full fragment; decimals are written as ``{"$decimal": "..."}``.
"""
from __future__ import annotations

import csv
import io
import json
import os
from collections import deque
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .graph import Fragment, canonical_json


class EndpointError(ValueError):
    pass


class Format(str, Enum):
    DELIMITED_TEXT = "DelimitedText"
    RECORD_LINES = "RecordLines"

    @classmethod
    def for_path(cls, path) -> Format:
        return cls.RECORD_LINES if str(path).endswith((".jsonl", ".ndjson")) else cls.DELIMITED_TEXT


class Mode(str, Enum):
    SOURCE = "Source"
    SINK = "Sink"


META_COLUMNS = ("source_seq", "event_time", "source", "loops", "lane")
TYPES = ("int", "float", "decimal", "text", "bool", "time")


def type_of(value) -> str:
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, int):
        return "int"
    if isinstance(value, float):
        return "float"
    if isinstance(value, Decimal):
        return "decimal"
    if isinstance(value, str):
        return "text"
    raise EndpointError(f"unsupported value {value!r}")


def format_value(value, type_name: str) -> str:
    if type_of(value) != type_name and not (type_name == "time" and type_of(value) == "int"):
        raise EndpointError(f"value {value!r} is not of type {type_name}")
    if type_name == "bool":
        return "true" if value else "false"
    if type_name == "float":
        return repr(value)
    return str(value)


def parse_value(text: str, type_name: str):
    try:
        if type_name in ("int", "time"):
            return int(text)
        if type_name == "float":
            return float(text)
        if type_name == "decimal":
            return Decimal(text)
        if type_name == "bool":
            if text not in ("true", "false"):
                raise ValueError(text)
            return text == "true"
        if type_name == "text":
            return text
    except (ValueError, InvalidOperation):
        raise EndpointError(f"cannot read {text!r} as {type_name}") from None
    raise EndpointError(f"unknown column type {type_name!r}")


@dataclass(frozen=True)
class Column:
    name: str
    type: str

    def header(self) -> str:
        return f"{self.name}:{self.type}"


def parse_header(row: Sequence[str]) -> tuple[list[Column], dict[str, int]]:
    columns, meta = [], {}
    for i, cell in enumerate(row):
        if cell in META_COLUMNS:
            meta[cell] = i
            continue
        name, sep, type_name = cell.rpartition(":")
        if not sep or not name or type_name not in TYPES:
            raise EndpointError(f"header cell {cell!r} is not 'name:type'")
        columns.append(Column(name, type_name))
    return columns, meta


@dataclass(frozen=True)
class Rejection:
    line: int
    message: str


@dataclass
class DatasetEndpoint:
    location: Path
    format: Format | None = None
    schema: tuple[Column, ...] | None = None
    mode: Mode = Mode.SOURCE
    name: str = ""

    def __post_init__(self):
        self.location = Path(self.location)
        if self.format is None:
            self.format = Format.for_path(self.location)
        self.format = Format(self.format)
        self.mode = Mode(self.mode)
        if self.schema is not None:
            self.schema = tuple(c if isinstance(c, Column) else Column(*c) for c in self.schema)
        if not self.name:
            self.name = self.location.stem


class DatasetSource:
    """Streaming reader. Iterating twice re-reads the file from the start."""

    def __init__(self, endpoint: DatasetEndpoint):
        self.endpoint = endpoint
        self.rejected: list[Rejection] = []
        self.accepted = 0
        if not endpoint.location.exists():
            raise EndpointError(f"no such dataset: {endpoint.location}")

    def __iter__(self) -> Iterator[Fragment]:
        self.rejected, self.accepted = [], 0
        if self.endpoint.format is Format.RECORD_LINES:
            yield from self._lines()
        else:
            yield from self._delimited()

    def _reject(self, line: int, message: str) -> None:
        self.rejected.append(Rejection(line, message))

    def _delimited(self) -> Iterator[Fragment]:
        with open(self.endpoint.location, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                return
            columns, meta = parse_header(header)
            if self.endpoint.schema is not None and tuple(columns) != self.endpoint.schema:
                raise EndpointError(f"{self.endpoint.location}: header does not match schema")
            width = len(header)
            for row in reader:
                line = reader.line_num
                if len(row) != width:
                    self._reject(line, f"expected {width} cells, got {len(row)}")
                    continue
                try:
                    payload, i = {}, 0
                    for pos, cell in enumerate(row):
                        if pos in meta.values():
                            continue
                        col = columns[i]
                        payload[col.name] = parse_value(cell, col.type)
                        i += 1
                    get = lambda k, d: row[meta[k]] if k in meta else d  # noqa: E731
                    seq = int(get("source_seq", self.accepted))
                    frag = Fragment(
                        payload,
                        event_time=int(get("event_time", seq)),
                        source_seq=seq,
                        source=get("source", ""),
                        loops=int(get("loops", 0) or 0),
                        lane=int(get("lane", 0) or 0),
                    )
                except (EndpointError, ValueError) as exc:
                    self._reject(line, str(exc))
                    continue
                self.accepted += 1
                yield frag

    def _lines(self) -> Iterator[Fragment]:
        with open(self.endpoint.location, encoding="utf-8") as fh:
            for line, text in enumerate(fh, 1):
                if not text.strip():
                    continue
                try:
                    d = json.loads(text)
                    if not isinstance(d, dict) or not isinstance(d.get("payload"), dict):
                        raise EndpointError("record has no payload object")
                    d.setdefault("source_seq", self.accepted)
                    frag = Fragment.from_dict(d)
                    for v in frag.payload.values():
                        type_of(v)
                except (ValueError, KeyError, TypeError) as exc:
                    self._reject(line, str(exc))
                    continue
                self.accepted += 1
                yield frag


class DatasetSink:
    """Writer accepting fragments in arrival order; usable as a run consumer."""

    def __init__(self, endpoint: DatasetEndpoint):
        self.endpoint = endpoint
        self.columns: tuple[Column, ...] | None = endpoint.schema
        self.accepted = 0
        self.rejected: list[Rejection] = []
        endpoint.location.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(endpoint.location, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        if self.columns is not None and endpoint.format is Format.DELIMITED_TEXT:
            self._write_header()

    def _write_header(self) -> None:
        self._writer.writerow([*META_COLUMNS, *(c.header() for c in self.columns)])

    def __call__(self, fragment: Fragment) -> None:
        self.write(fragment)

    def write(self, fragment: Fragment) -> bool:
        try:
            if self.endpoint.format is Format.RECORD_LINES:
                for v in fragment.payload.values():
                    type_of(v)
                self._fh.write(record_line(fragment) + "\n")
            else:
                self._write_row(fragment)
        except EndpointError as exc:
            self.rejected.append(Rejection(self.accepted + len(self.rejected) + 1, str(exc)))
            return False
        self.accepted += 1
        return True

    def _write_row(self, f: Fragment) -> None:
        if self.columns is None:
            for k in f.payload:
                if k in META_COLUMNS:
                    raise EndpointError(f"payload field {k!r} clashes with a metadata column")
            self.columns = tuple(Column(k, type_of(v)) for k, v in f.payload.items())
            self._write_header()
        if tuple(f.payload) != tuple(c.name for c in self.columns):
            raise EndpointError(f"fields {list(f.payload)} do not match schema")
        cells = [format_value(f.payload[c.name], c.type) for c in self.columns]
        self._writer.writerow([f.source_seq, f.event_time, f.source, f.loops, f.lane, *cells])

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self) -> DatasetSink:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def open_source(endpoint: DatasetEndpoint | str | os.PathLike) -> DatasetSource:
    if not isinstance(endpoint, DatasetEndpoint):
        endpoint = DatasetEndpoint(endpoint)
    return DatasetSource(endpoint)


def open_sink(endpoint: DatasetEndpoint | str | os.PathLike) -> DatasetSink:
    if not isinstance(endpoint, DatasetEndpoint):
        endpoint = DatasetEndpoint(endpoint, mode=Mode.SINK)
    return DatasetSink(endpoint)


def write_dataset(path, fragments: Iterable[Fragment], format: Format | None = None) -> DatasetSink:
    with open_sink(DatasetEndpoint(path, format, mode=Mode.SINK)) as sink:
        for f in fragments:
            sink.write(f)
    return sink


def read_dataset(path, format: Format | None = None) -> list[Fragment]:
    return list(open_source(DatasetEndpoint(path, format)))


# -- plots and animations ----------------------------------------------------------------


@dataclass(frozen=True)
class PlotEndpoint:
    """A fixed window ``[first, last]`` (positions in source order) over a finished run."""

    location: Path
    first: int
    last: int
    series: tuple[str, ...] = ()
    title: str = ""

    def __post_init__(self):
        object.__setattr__(self, "location", Path(self.location))
        object.__setattr__(self, "series", tuple(self.series))
        if self.first < 0 or self.first > self.last:
            raise EndpointError(f"bad window [{self.first}, {self.last}]")


def plot_emit(endpoint: PlotEndpoint, samples: Iterable[Fragment]) -> tuple[Path, Path]:
    """Write the window's rows as CSV next to a small JSON plot spec."""
    ordered = sorted(samples, key=lambda f: (f.source_seq, f.loops, f.lane))
    if endpoint.last >= len(ordered):
        raise EndpointError(f"window [{endpoint.first}, {endpoint.last}] exceeds {len(ordered)} samples")
    rows = ordered[endpoint.first:endpoint.last + 1]
    series = endpoint.series or tuple(rows[0].payload)
    data_path = endpoint.location.with_suffix(".csv")
    spec_path = endpoint.location.with_suffix(".plot.json")
    data_path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source_seq", "event_time", *series])
    for f in rows:
        try:
            w.writerow([f.source_seq, f.event_time, *(f.payload[s] for s in series)])
        except KeyError as exc:
            raise EndpointError(f"sample {f.source_seq} has no series {exc.args[0]!r}") from None
    data_path.write_text(buf.getvalue(), encoding="utf-8")
    spec = {
        "data": data_path.name,
        "mark": "line",
        "title": endpoint.title,
        "window": [endpoint.first, endpoint.last],
        "x": "source_seq",
        "y": list(series),
    }
    spec_path.write_text(canonical_json(spec), encoding="utf-8")
    return data_path, spec_path


@dataclass
class AnimationEndpoint:
    """Sliding window of the last ``window`` fragments, written as a frame every ``cadence`` arrivals."""

    directory: Path
    window: int = 10
    cadence: int = 1
    seen: int = 0
    frames: list[Path] = field(default_factory=list)

    def __post_init__(self):
        self.directory = Path(self.directory)
        if self.window < 1 or self.cadence < 1:
            raise EndpointError("window and cadence must be >= 1")
        self._buffer: deque[Fragment] = deque(maxlen=self.window)

    def __call__(self, fragment: Fragment) -> None:
        self._buffer.append(fragment)
        self.seen += 1
        if self.seen % self.cadence == 0:
            self._write_frame()

    def current(self) -> list[Fragment]:
        return list(self._buffer)

    def _write_frame(self) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.directory / f"frame_{len(self.frames):06d}.jsonl"
        path.write_bytes(encode_record_lines(self._buffer))
        self.frames.append(path)


def animate(endpoint: AnimationEndpoint, fragments: Iterable[Fragment]) -> list[Path]:
    for f in fragments:
        endpoint(f)
    return endpoint.frames


def read_frame(path) -> list[Fragment]:
    with open(path, encoding="utf-8") as fh:
        return [Fragment.from_dict(json.loads(line)) for line in fh if line.strip()]


def record_line(fragment: Fragment) -> str:
    return json.dumps(fragment.to_dict(), sort_keys=True, separators=(",", ":"))


def encode_record_lines(fragments: Iterable[Fragment]) -> bytes:
    """Dataset bytes in RecordLines form, as stored in the registry."""
    return "".join(record_line(f) + "\n" for f in fragments).encode("utf-8")


def decode_record_lines(data: bytes) -> list[Fragment]:
    return [Fragment.from_dict(json.loads(line)) for line in data.decode("utf-8").splitlines() if line.strip()]
