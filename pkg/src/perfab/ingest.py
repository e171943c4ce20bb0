"""Loading event logs, assignments and device maps; deriving per-user covariates.

The loaders keep data columnar (numpy arrays) because every downstream step
groups users by integer codes. ``EventLog`` and ``Covariates`` still iterate as
the record types (``PerfEvent`` / ``UserCovariates``) for callers that want rows.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Mapping

import numpy as np

OTHER_DEVICE = "Other"
DEFAULT_DEVICE_THRESHOLD = 10_000
WEEK_MS = 7 * 24 * 3600 * 1000

EVENT_FIELDS = ("user_id", "metric_id", "value", "timestamp")
ASSIGNMENT_FIELDS = ("user_id", "bucket")
DEVICE_FIELDS = ("user_id", "device_model")
BUCKETS = ("treatment", "control")


class IngestError(ValueError):
    """Malformed input; carries the source name, 1-based line number and field."""

    def __init__(self, message: str, *, line: int | None = None, field: str | None = None,
                 source: str | None = None) -> None:
        self.line = line
        self.field = field
        self.source = source
        where = []
        if source:
            where.append(str(source))
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field {field!r}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


@dataclass(frozen=True)
class PerfEvent:
    user_id: str
    metric_id: str
    value: float
    timestamp: int


@dataclass(frozen=True)
class Assignment:
    user_id: str
    bucket: str


@dataclass(frozen=True)
class UserCovariates:
    user_id: str
    bucket: str
    device_class: str
    engagement_level: str
    pre_period_event_count: int


@dataclass
class ParseSummary:
    rows_read: int = 0
    rows_rejected: int = 0
    rejected_lines: list[int] = field(default_factory=list)

    def reject(self, line: int) -> None:
        self.rows_rejected += 1
        self.rejected_lines.append(line)


@dataclass(frozen=True)
class EventLog:
    """Columnar collection of :class:`PerfEvent`, row order preserved."""

    user_id: np.ndarray
    metric_id: np.ndarray
    value: np.ndarray
    timestamp: np.ndarray
    summary: ParseSummary = field(default_factory=ParseSummary, compare=False)

    @classmethod
    def from_events(cls, events: Iterable[PerfEvent]) -> "EventLog":
        events = list(events)
        return cls(
            user_id=np.array([e.user_id for e in events], dtype=object),
            metric_id=np.array([e.metric_id for e in events], dtype=object),
            value=np.array([e.value for e in events], dtype=float),
            timestamp=np.array([e.timestamp for e in events], dtype=np.int64),
        )

    def __len__(self) -> int:
        return int(self.value.size)

    def __iter__(self) -> Iterator[PerfEvent]:
        for u, m, v, t in zip(self.user_id, self.metric_id, self.value, self.timestamp):
            yield PerfEvent(u, m, float(v), int(t))

    def select(self, mask: np.ndarray) -> "EventLog":
        return EventLog(self.user_id[mask], self.metric_id[mask], self.value[mask],
                        self.timestamp[mask], self.summary)

    def for_metric(self, metric_id: str) -> "EventLog":
        return self.select(self.metric_id == metric_id)

    def window(self, start: int | None = None, end: int | None = None) -> "EventLog":
        """Events with ``start <= timestamp < end``."""
        mask = np.ones(len(self), dtype=bool)
        if start is not None:
            mask &= self.timestamp >= start
        if end is not None:
            mask &= self.timestamp < end
        return self.select(mask)

    def metrics(self) -> list[str]:
        return sorted(set(self.metric_id.tolist()))


def _text_stream(source) -> IO[str]:
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    if isinstance(source, io.TextIOBase):
        return source
    try:
        return io.TextIOWrapper(source, encoding="utf-8", newline="")
    except AttributeError:
        return source


def _parse_value(raw, line: int, source) -> float | None:
    """Returns None for a parseable but invalid (negative) latency."""
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise IngestError(f"cannot parse {raw!r} as a number", line=line, field="value", source=source)
    if not math.isfinite(value):
        raise IngestError(f"non-finite value {raw!r}", line=line, field="value", source=source)
    if value < 0:
        return None
    return value


def _parse_timestamp(raw, line: int, source) -> int | None:
    try:
        if isinstance(raw, float) and raw.is_integer():
            raw = int(raw)
        ts = int(raw)
    except (TypeError, ValueError):
        raise IngestError(f"cannot parse {raw!r} as an integer", line=line, field="timestamp", source=source)
    if ts <= 0:
        return None
    return ts


def _require_id(raw, line: int, name: str, source) -> str:
    if raw is None or (isinstance(raw, str) and raw.strip() == ""):
        raise IngestError("missing value", line=line, field=name, source=source)
    return str(raw)


def _check_header(header, expected, source) -> None:
    if header is None:
        raise IngestError("empty input, expected a header", line=1, source=source)
    missing = [f for f in expected if f not in header]
    if missing:
        raise IngestError(f"header lacks {missing}; expected {','.join(expected)}", line=1,
                          field=missing[0], source=source)


def _event_rows(stream: IO[str], fmt: str, source) -> Iterator[tuple[int, dict]]:
    if fmt == "csv":
        reader = csv.DictReader(stream)
        _check_header(reader.fieldnames, EVENT_FIELDS, source)
        for row in reader:
            if None in row or any(row.get(f) is None for f in EVENT_FIELDS):
                raise IngestError("wrong number of columns", line=reader.line_num, source=source)
            yield reader.line_num, row
    elif fmt == "jsonl":
        for lineno, text in enumerate(stream, start=1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise IngestError(f"invalid JSON ({exc.msg})", line=lineno, source=source)
            if not isinstance(obj, dict):
                raise IngestError("expected a JSON object", line=lineno, source=source)
            for f in EVENT_FIELDS:
                if f not in obj:
                    raise IngestError("missing key", line=lineno, field=f, source=source)
            yield lineno, obj
    else:
        raise IngestError(f"unknown format {fmt!r}; expected csv or jsonl", source=source)


def load_events(source, format: str = "csv", *, name: str | None = None) -> EventLog:
    """Parse an events stream (bytes, binary or text file object).

    Unparseable rows raise :class:`IngestError`; rows violating the value or
    timestamp invariants are skipped and counted in ``log.summary``.
    """
    stream = _text_stream(source)
    summary = ParseSummary()
    users, metrics, values, stamps = [], [], [], []
    try:
        for line, row in _event_rows(stream, format, name):
            summary.rows_read += 1
            uid = _require_id(row["user_id"], line, "user_id", name)
            mid = _require_id(row["metric_id"], line, "metric_id", name)
            value = _parse_value(row["value"], line, name)
            ts = _parse_timestamp(row["timestamp"], line, name)
            if value is None or ts is None:
                summary.reject(line)
                continue
            users.append(uid)
            metrics.append(mid)
            values.append(value)
            stamps.append(ts)
    except UnicodeDecodeError as exc:
        raise IngestError(f"input is not valid UTF-8 ({exc.reason})", source=name)
    return EventLog(
        user_id=np.array(users, dtype=object),
        metric_id=np.array(metrics, dtype=object),
        value=np.array(values, dtype=float),
        timestamp=np.array(stamps, dtype=np.int64),
        summary=summary,
    )


def load_assignments(source, *, name: str | None = None) -> list[Assignment]:
    stream = _text_stream(source)
    reader = csv.DictReader(stream)
    _check_header(reader.fieldnames, ASSIGNMENT_FIELDS, name)
    seen: set[str] = set()
    out = []
    for row in reader:
        line = reader.line_num
        uid = _require_id(row.get("user_id"), line, "user_id", name)
        bucket = (row.get("bucket") or "").strip().lower()
        if bucket not in BUCKETS:
            raise IngestError(f"bucket must be treatment or control, got {row.get('bucket')!r}",
                              line=line, field="bucket", source=name)
        if uid in seen:
            raise IngestError(f"user {uid!r} assigned more than once", line=line, field="user_id", source=name)
        seen.add(uid)
        out.append(Assignment(uid, bucket))
    return out


def load_device_map(source, *, name: str | None = None) -> dict[str, str]:
    stream = _text_stream(source)
    reader = csv.DictReader(stream)
    _check_header(reader.fieldnames, DEVICE_FIELDS, name)
    out: dict[str, str] = {}
    for row in reader:
        line = reader.line_num
        uid = _require_id(row.get("user_id"), line, "user_id", name)
        out[uid] = _require_id(row.get("device_model"), line, "device_model", name)
    return out


@dataclass(frozen=True)
class Covariates:
    """Per-user covariates in columnar form, one row per assigned user.

    ``treated`` is the bucket indicator, ``device`` indexes ``device_names``
    and ``high_engagement`` is the engagement split.
    """

    user_ids: np.ndarray
    treated: np.ndarray
    device: np.ndarray
    device_names: tuple[str, ...]
    high_engagement: np.ndarray
    pre_counts: np.ndarray
    summary: dict = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return int(self.treated.size)

    def __iter__(self) -> Iterator[UserCovariates]:
        names = self.device_names
        for uid, t, d, h, c in zip(self.user_ids, self.treated, self.device,
                                    self.high_engagement, self.pre_counts):
            yield UserCovariates(uid, "treatment" if t else "control", names[d],
                                 "high" if h else "low", int(c))

    def index(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.user_ids.tolist())}

    def device_class(self) -> np.ndarray:
        return np.asarray(self.device_names, dtype=object)[self.device]

    @classmethod
    def from_arrays(cls, treated, device_class, high_engagement, pre_counts=None, user_ids=None) -> "Covariates":
        """Build from raw arrays; ``device_class`` may be names or integer codes."""
        treated = np.asarray(treated, dtype=bool)
        n = treated.size
        device_class = np.asarray(device_class)
        if device_class.dtype.kind in "iu":
            names = tuple(str(i) for i in range(int(device_class.max()) + 1)) if n else ()
            codes = device_class.astype(np.int64)
        else:
            names_arr, codes = np.unique(device_class.astype(str), return_inverse=True)
            names = tuple(names_arr.tolist())
        if user_ids is None:
            user_ids = np.array([f"u{i}" for i in range(n)], dtype=object)
        if pre_counts is None:
            pre_counts = np.zeros(n, dtype=np.int64)
        return cls(np.asarray(user_ids, dtype=object), treated, np.asarray(codes, dtype=np.int64),
                   names, np.asarray(high_engagement, dtype=bool), np.asarray(pre_counts, dtype=np.int64))


def engagement_split(counts) -> np.ndarray:
    """High engagement iff count exceeds the mean count; ties fall to low."""
    counts = np.asarray(counts, dtype=float)
    if counts.size == 0:
        return np.zeros(0, dtype=bool)
    return counts > counts.mean()


def bucket_devices(models: Iterable[str], threshold: int) -> list[str]:
    """Keep models with at least ``threshold`` users; everything else becomes ``Other``."""
    models = list(models)
    counts: dict[str, int] = {}
    for m in models:
        counts[m] = counts.get(m, 0) + 1
    return [m if counts[m] >= threshold else OTHER_DEVICE for m in models]


def derive_covariates(pre_period_events, assignments: Iterable[Assignment],
                      device_map: Mapping[str, str],
                      device_user_threshold: int = DEFAULT_DEVICE_THRESHOLD) -> Covariates:
    """Derive bucket, device class and engagement level for every assigned user.

    ``pre_period_events`` should already be restricted to the analysed metric
    and the pre-experiment window. Users without a device model land in
    ``Other``; events from unassigned users are counted in ``summary`` and
    otherwise ignored.
    """
    assignments = list(assignments)
    if not assignments:
        raise ValueError("no assigned users")
    user_ids = [a.user_id for a in assignments]
    index = {u: i for i, u in enumerate(user_ids)}
    if isinstance(pre_period_events, EventLog):
        event_users = pre_period_events.user_id.tolist()
    else:
        event_users = [e.user_id for e in pre_period_events]

    counts = np.zeros(len(user_ids), dtype=np.int64)
    unassigned_users: set[str] = set()
    unassigned_events = 0
    for u in event_users:
        i = index.get(u)
        if i is None:
            unassigned_events += 1
            unassigned_users.add(u)
        else:
            counts[i] += 1

    no_device = sum(1 for u in user_ids if u not in device_map)
    models = [device_map.get(u, OTHER_DEVICE) for u in user_ids]
    classes = bucket_devices(models, device_user_threshold)
    names_arr, codes = np.unique(np.array(classes, dtype=str), return_inverse=True)

    summary = {
        "unassigned_users_excluded": len(unassigned_users),
        "unassigned_events_excluded": unassigned_events,
        "users_without_device": no_device,
        "engagement_mean": float(counts.mean()),
        "device_threshold": int(device_user_threshold),
    }
    return Covariates(
        user_ids=np.array(user_ids, dtype=object),
        treated=np.array([a.bucket == "treatment" for a in assignments], dtype=bool),
        device=codes.astype(np.int64),
        device_names=tuple(names_arr.tolist()),
        high_engagement=engagement_split(counts),
        pre_counts=counts,
        summary=summary,
    )
