"""Event-log ingestion: CSV and XES parsing into case-grouped, time-ordered traces.

Attribute values are carried as plain Python objects:

- categorical -> ``str``
- numeric     -> finite ``float``
- timestamp   -> timezone-aware ``datetime`` in UTC, millisecond precision

The three core fields (case id, activity, timestamp) live on :class:`Event`
directly; everything else is kept in ``Event.extras`` in column order.
"""

from __future__ import annotations

import csv
import gzip
import io
import math
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Iterable, Iterator, Mapping, Union
from xml.sax.saxutils import quoteattr

CATEGORICAL = "categorical"
NUMERIC = "numeric"
TIMESTAMP = "timestamp"
ATTRIBUTE_KINDS = (CATEGORICAL, NUMERIC, TIMESTAMP)

RESERVED_KEYS = ("case_id", "activity", "timestamp")

AttributeValue = Union[str, float, datetime]
ByteSource = Union[bytes, bytearray, IO[bytes]]


class EventLogError(ValueError):
    """Base class for ingestion failures."""


class MissingColumnError(EventLogError):
    def __init__(self, column: str):
        super().__init__(f"column {column!r} not found in header")
        self.column = column


class TimestampParseError(EventLogError):
    def __init__(self, row: int, value: str):
        super().__init__(f"row {row}: cannot parse timestamp {value!r}")
        self.row = row
        self.value = value


class EmptyLogError(EventLogError):
    pass


class XmlMalformedError(EventLogError):
    def __init__(self, position, message: str = ""):
        super().__init__(f"malformed XML at line/column {position}: {message}")
        self.position = position


class MissingConceptNameError(EventLogError):
    def __init__(self, trace_index: int):
        super().__init__(f"trace {trace_index} has no concept:name")
        self.trace_index = trace_index


class MissingTimestampError(EventLogError):
    def __init__(self, trace_index: int, event_index: int):
        super().__init__(
            f"trace {trace_index}, event {event_index} has no time:timestamp"
        )
        self.trace_index = trace_index
        self.event_index = event_index


# -- timestamps -------------------------------------------------------------

_FRACTION = re.compile(r"(\.\d+)")


def _truncate_ms(ts: datetime) -> datetime:
    return ts.replace(microsecond=(ts.microsecond // 1000) * 1000)


def parse_timestamp(value: str, fmt: str | None = None) -> datetime:
    """Parse ``value`` to a UTC instant at millisecond precision.

    With ``fmt=None`` the value must be ISO-8601 (``Z`` suffix and offsets
    accepted); otherwise ``fmt`` is a :func:`datetime.strptime` pattern.
    Naive results are taken to be UTC. Raises ``ValueError`` on failure.
    """
    text = value.strip()
    if fmt is None:
        if text.endswith(("Z", "z")):
            text = text[:-1] + "+00:00"
        # fromisoformat on 3.10 only takes 3- or 6-digit fractions
        m = _FRACTION.search(text)
        if m:
            digits = m.group(1)[1:]
            text = text[: m.start()] + "." + (digits + "000000")[:6] + text[m.end():]
        ts = datetime.fromisoformat(text)
    else:
        ts = datetime.strptime(text, fmt)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return _truncate_ms(ts.astimezone(timezone.utc))


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).isoformat(timespec="milliseconds")


# -- data model -------------------------------------------------------------


@dataclass(frozen=True)
class Event:
    case_id: str
    activity: str
    timestamp: datetime
    extras: Mapping[str, AttributeValue] = field(default_factory=dict)

    def __post_init__(self):
        if not self.activity:
            raise ValueError("activity must be non-empty")
        clash = set(self.extras).intersection(RESERVED_KEYS)
        if clash:
            raise ValueError(f"extras may not use reserved keys {sorted(clash)}")


@dataclass(frozen=True)
class Trace:
    case_id: str
    events: tuple[Event, ...]

    def __post_init__(self):
        if not self.events:
            raise ValueError(f"trace {self.case_id!r} is empty")
        for prev, nxt in zip(self.events, self.events[1:]):
            if nxt.timestamp < prev.timestamp:
                raise ValueError(f"trace {self.case_id!r} is not time-ordered")
        if any(e.case_id != self.case_id for e in self.events):
            raise ValueError(f"trace {self.case_id!r} mixes case ids")

    def __len__(self) -> int:
        return len(self.events)

    @property
    def activities(self) -> list[str]:
        return [e.activity for e in self.events]


@dataclass(frozen=True)
class LogSchema:
    """Extra-attribute names in first-seen order, with their declared kinds."""

    attributes: Mapping[str, str] = field(default_factory=dict)

    @property
    def columns(self) -> tuple[str, ...]:
        return RESERVED_KEYS + tuple(self.attributes)

    def kind(self, name: str) -> str:
        if name == "activity" or name == "case_id":
            return CATEGORICAL
        if name == "timestamp":
            return TIMESTAMP
        return self.attributes[name]


@dataclass(frozen=True)
class RejectedRow:
    row: int
    reason: str


@dataclass(frozen=True)
class EventLog:
    traces: tuple[Trace, ...]
    schema: LogSchema = field(default_factory=LogSchema)
    source: str = field(default="", compare=False)
    rejected: tuple[RejectedRow, ...] = field(default=(), compare=False)

    def __post_init__(self):
        ids = [t.case_id for t in self.traces]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate case ids across traces")

    def __len__(self) -> int:
        return len(self.traces)

    def __iter__(self) -> Iterator[Trace]:
        return iter(self.traces)

    @property
    def case_ids(self) -> list[str]:
        return [t.case_id for t in self.traces]

    @property
    def n_events(self) -> int:
        return sum(len(t) for t in self.traces)

    def events(self) -> Iterator[Event]:
        for trace in self.traces:
            yield from trace.events

    def activities(self) -> list[str]:
        """Distinct activity labels in first-seen order."""
        return list(dict.fromkeys(e.activity for e in self.events()))

    def subset(self, case_ids: Iterable[str]) -> "EventLog":
        keep = set(case_ids)
        return EventLog(
            tuple(t for t in self.traces if t.case_id in keep), self.schema, self.source
        )


@dataclass(frozen=True)
class LogStats:
    cases: int
    events: int
    distinct_activities: int
    avg_trace_length: float


def log_stats(log: EventLog) -> LogStats:
    if len(log) == 0:
        raise EmptyLogError("log has no traces")
    events = log.n_events
    return LogStats(
        cases=len(log),
        events=events,
        distinct_activities=len(log.activities()),
        avg_trace_length=events / len(log),
    )


def _group(rows: list[Event], schema: LogSchema, source: str, rejected) -> EventLog:
    if not rows:
        raise EmptyLogError(f"no valid events in {source or 'input'}")
    by_case: dict[str, list[Event]] = {}
    for ev in rows:
        by_case.setdefault(ev.case_id, []).append(ev)
    # sorted() is stable, so equal timestamps keep file order
    traces = tuple(
        Trace(cid, tuple(sorted(evs, key=lambda e: e.timestamp)))
        for cid, evs in by_case.items()
    )
    return EventLog(traces, schema, source, tuple(rejected))


def _safe_key(name: str) -> str:
    return f"extra:{name}" if name in RESERVED_KEYS else name


def _read_bytes(data: ByteSource) -> bytes:
    raw = data if isinstance(data, (bytes, bytearray)) else data.read()
    raw = bytes(raw)
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


# -- CSV --------------------------------------------------------------------


@dataclass
class ColumnMapping:
    """How CSV columns map onto events.

    ``types`` optionally pins an extra column to one of ``categorical``,
    ``numeric`` or ``timestamp``; unpinned columns are numeric when every
    non-empty value parses as a finite float, categorical otherwise.
    """

    case: str = "case_id"
    activity: str = "activity"
    timestamp: str = "timestamp"
    timestamp_format: str | None = None
    types: dict[str, str] = field(default_factory=dict)
    delimiter: str = ","


def _to_float(text: str) -> float | None:
    try:
        x = float(text)
    except ValueError:
        return None
    return x if math.isfinite(x) else None


def _convert(text: str, kind: str, fmt: str | None) -> AttributeValue:
    # values that fail their declared kind degrade to categorical text
    if kind == NUMERIC:
        x = _to_float(text)
        return text if x is None else x
    if kind == TIMESTAMP:
        try:
            return parse_timestamp(text, fmt)
        except ValueError:
            return text
    return text


def parse_csv(data: ByteSource, mapping: ColumnMapping | None = None,
              source: str = "") -> EventLog:
    """Parse a UTF-8 CSV event log with a header row.

    Rows with an empty case id or activity are skipped and listed in
    ``EventLog.rejected`` by zero-based data-row index.
    """
    mapping = mapping or ColumnMapping()
    text = _read_bytes(data).decode("utf-8-sig")
    reader = csv.reader(io.StringIO(text, newline=""), delimiter=mapping.delimiter)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise EmptyLogError("CSV input has no header") from None
    for col in (mapping.case, mapping.activity, mapping.timestamp):
        if col not in header:
            raise MissingColumnError(col)
    i_case = header.index(mapping.case)
    i_act = header.index(mapping.activity)
    i_ts = header.index(mapping.timestamp)
    extra_cols = [
        (j, name) for j, name in enumerate(header) if j not in (i_case, i_act, i_ts)
    ]
    for name in mapping.types:
        if name not in header:
            raise MissingColumnError(name)
    records = [r for r in reader if any(cell.strip() for cell in r)]

    kinds: dict[str, str] = {}
    for j, name in extra_cols:
        kind = mapping.types.get(name)
        if kind is None:
            values = [r[j].strip() for r in records if j < len(r) and r[j].strip()]
            numeric = bool(values) and all(_to_float(v) is not None for v in values)
            kind = NUMERIC if numeric else CATEGORICAL
        elif kind not in ATTRIBUTE_KINDS:
            raise EventLogError(f"unknown attribute type {kind!r} for column {name!r}")
        kinds[name] = kind

    events: list[Event] = []
    rejected: list[RejectedRow] = []
    for row_idx, rec in enumerate(records):
        rec = rec + [""] * (len(header) - len(rec))
        case_id = rec[i_case].strip()
        activity = rec[i_act].strip()
        if not case_id or not activity:
            rejected.append(RejectedRow(row_idx, "empty case id" if not case_id
                                        else "empty activity"))
            continue
        try:
            ts = parse_timestamp(rec[i_ts], mapping.timestamp_format)
        except ValueError:
            raise TimestampParseError(row_idx, rec[i_ts]) from None
        extras = {}
        for j, name in extra_cols:
            cell = rec[j].strip()
            if cell:
                extras[_safe_key(name)] = _convert(cell, kinds[name],
                                                   mapping.timestamp_format)
        events.append(Event(case_id, activity, ts, extras))
    schema = LogSchema({_safe_key(n): k for n, k in kinds.items()})
    return _group(events, schema, source, rejected)


def write_csv(log: EventLog, delimiter: str = ",") -> bytes:
    """Serialize ``log`` to CSV bytes that :func:`parse_csv` reads back."""
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    names = list(log.schema.attributes)
    writer.writerow(list(RESERVED_KEYS) + names)
    for ev in log.events():
        row = [ev.case_id, ev.activity, format_timestamp(ev.timestamp)]
        for name in names:
            v = ev.extras.get(name, "")
            if isinstance(v, datetime):
                v = format_timestamp(v)
            elif isinstance(v, float):
                v = repr(v)
            row.append(v)
        writer.writerow(row)
    return buf.getvalue().encode("utf-8")


# -- XES --------------------------------------------------------------------

_XES_SCALARS = {"string", "date", "int", "float", "boolean", "id"}


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _xes_value(tag: str, value: str) -> tuple[str, AttributeValue]:
    if tag in ("int", "float"):
        x = _to_float(value)
        if x is not None:
            return NUMERIC, x
        return CATEGORICAL, value
    if tag == "date":
        try:
            return TIMESTAMP, parse_timestamp(value)
        except ValueError:
            return CATEGORICAL, value
    return CATEGORICAL, value


def parse_xes(data: ByteSource, source: str = "",
              missing_timestamps: str = "error") -> EventLog:
    """Parse an XES document (optionally gzip-compressed).

    ``missing_timestamps="row_order"`` lets events without ``time:timestamp``
    inherit the previous event's instant (the epoch for a leading event), so
    their document order survives the per-case sort.
    """
    if missing_timestamps not in ("error", "row_order"):
        raise ValueError("missing_timestamps must be 'error' or 'row_order'")
    raw = _read_bytes(data)
    events: list[Event] = []
    rejected: list[RejectedRow] = []
    kinds: dict[str, str] = {}
    stack: list[str] = []
    trace_attrs: dict[str, AttributeValue] = {}
    trace_events: list[dict] = []
    trace_index = -1
    event_attrs: dict | None = None
    event_row = 0
    epoch = datetime(1970, 1, 1, tzinfo=timezone.utc)

    try:
        for kind, elem in ET.iterparse(io.BytesIO(raw), events=("start", "end")):
            tag = _local(elem.tag)
            if kind == "start":
                parent = stack[-1] if stack else None
                stack.append(tag)
                if tag == "trace" and parent == "log":
                    trace_index += 1
                    trace_attrs, trace_events = {}, []
                elif tag == "event" and parent == "trace":
                    event_attrs = {}
                elif parent in ("trace", "event") and "key" in elem.attrib:
                    key = elem.attrib["key"]
                    value = elem.attrib.get("value", "")
                    if tag in _XES_SCALARS:
                        vkind, val = _xes_value(tag, value)
                    else:
                        vkind, val = CATEGORICAL, value
                    if parent == "event":
                        if key in ("concept:name", "time:timestamp"):
                            event_attrs[key] = val
                        else:
                            event_attrs[_safe_key(key)] = (vkind, val)
                    elif key == "concept:name":
                        trace_attrs[key] = value
                    else:
                        # trace-level attributes are copied onto every event
                        trace_attrs[f"case:{key}"] = (vkind, val)
                continue

            stack.pop()
            parent = stack[-1] if stack else None
            if tag == "event" and parent == "trace":
                trace_events.append(event_attrs)
                event_attrs = None
            elif tag == "trace" and parent == "log":
                case_id = str(trace_attrs.pop("concept:name", "")).strip()
                if not case_id:
                    raise MissingConceptNameError(trace_index)
                prev_ts = None
                for i, attrs in enumerate(trace_events):
                    row = event_row
                    event_row += 1
                    activity = str(attrs.pop("concept:name", "")).strip()
                    ts = attrs.pop("time:timestamp", None)
                    if not isinstance(ts, datetime):
                        if missing_timestamps == "error":
                            raise MissingTimestampError(trace_index, i)
                        ts = prev_ts or epoch
                    prev_ts = ts
                    if not activity:
                        rejected.append(RejectedRow(row, "empty activity"))
                        continue
                    extras = {}
                    for name, (vkind, val) in attrs.items():
                        extras[name] = val
                        kinds.setdefault(name, vkind)
                    for name, (vkind, val) in trace_attrs.items():
                        extras[name] = val
                        kinds.setdefault(name, vkind)
                    events.append(Event(case_id, activity, ts, extras))
                elem.clear()
    except ET.ParseError as exc:
        raise XmlMalformedError(exc.position, str(exc)) from None
    return _group(events, LogSchema(kinds), source, rejected)


def write_xes(log: EventLog) -> bytes:
    """Serialize ``log`` as a minimal XES document."""

    def attr(key: str, value: AttributeValue) -> str:
        if isinstance(value, datetime):
            tag, text = "date", format_timestamp(value)
        elif isinstance(value, float):
            tag, text = "float", repr(value)
        else:
            tag, text = "string", str(value)
        return f"<{tag} key={quoteattr(key)} value={quoteattr(text)}/>"

    lines = ['<?xml version="1.0" encoding="UTF-8"?>',
             '<log xes.version="1.0" xmlns="http://www.xes-standard.org/">']
    for trace in log.traces:
        lines.append("  <trace>")
        lines.append("    " + attr("concept:name", trace.case_id))
        for ev in trace.events:
            lines.append("    <event>")
            lines.append("      " + attr("concept:name", ev.activity))
            lines.append("      " + attr("time:timestamp", ev.timestamp))
            for key, value in ev.extras.items():
                lines.append("      " + attr(key, value))
            lines.append("    </event>")
        lines.append("  </trace>")
    lines.append("</log>")
    return ("\n".join(lines) + "\n").encode("utf-8")


def read_log(path: str | Path, mapping: ColumnMapping | None = None,
             fmt: str | None = None, **xes_options) -> EventLog:
    """Read a log from disk, choosing the parser from ``fmt`` or the suffix."""
    path = Path(path)
    if fmt is None:
        name = path.name.lower()
        if name.endswith(".gz"):
            name = name[:-3]
        fmt = "xes" if name.endswith(".xes") else "csv"
    raw = path.read_bytes()
    if fmt == "xes":
        return parse_xes(raw, source=str(path), **xes_options)
    if fmt == "csv":
        return parse_csv(raw, mapping, source=str(path))
    raise ValueError(f"unknown log format {fmt!r}")
