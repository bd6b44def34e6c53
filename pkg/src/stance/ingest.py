"""Parsing of retweet event logs, persistent-user trimming and time windows."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from typing import IO, Iterable, Sequence

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

DAY = 86400
REQUIRED_FIELDS = ("retweeter", "influencer", "ts")


@dataclass(frozen=True, slots=True)
class RetweetEvent:
    retweeter_id: str
    influencer_id: str
    timestamp: int
    sample_id: str


@dataclass(frozen=True)
class SampleSpec:
    sample_id: str
    start: int
    end: int
    source_paths: tuple = ()

    def __post_init__(self):
        if not self.start < self.end:
            raise ConfigError(f"sample {self.sample_id!r}: start must precede end")


@dataclass(frozen=True)
class TimeWindow:
    sample_id: str
    window_index: int
    start: int
    end: int
    empty: bool = False


@dataclass
class ParseStats:
    records: int = 0
    accepted: int = 0
    malformed: int = 0
    out_of_range: int = 0
    self_retweets: int = 0
    errors: list = field(default_factory=list)

    def as_dict(self):
        return {
            "records": self.records,
            "accepted": self.accepted,
            "malformed": self.malformed,
            "out_of_range": self.out_of_range,
            "self_retweets": self.self_retweets,
        }


def to_epoch(value) -> int:
    """Convert an ISO date/datetime string (UTC assumed) or an integer to epoch seconds."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return int(value)
    text = str(value).strip()
    if text.lstrip("-").isdigit():
        return int(text)
    try:
        if len(text) == 10:
            d = date.fromisoformat(text)
            dt = datetime(d.year, d.month, d.day, tzinfo=timezone.utc)
        else:
            dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
            if dt.tzinfo is None:
                dt = dt.replace(tzinfo=timezone.utc)
    except ValueError as exc:
        raise ConfigError(f"cannot parse date {value!r}") from exc
    return int(dt.timestamp())


def _records(stream: IO, fmt: str):
    if fmt == "jsonl":
        for lineno, line in enumerate(stream, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                yield lineno, None, f"invalid json: {exc.msg}"
                continue
            if not isinstance(rec, dict):
                yield lineno, None, "record is not an object"
                continue
            yield lineno, rec, None
    elif fmt == "csv":
        reader = csv.DictReader(stream)
        if reader.fieldnames is None:
            return
        missing = [f for f in REQUIRED_FIELDS if f not in reader.fieldnames]
        if missing:
            raise DataError(f"csv header lacks {missing}")
        for rec in reader:
            yield reader.line_num, rec, None
    else:
        raise ConfigError(f"unknown event format {fmt!r}")


def parse_events(
    stream,
    fmt: str,
    spec: SampleSpec,
    max_error_fraction: float = 0.01,
) -> tuple[list[RetweetEvent], ParseStats]:
    """Parse a jsonl or csv event stream into events of one sample.

    Events outside ``[spec.start, spec.end)`` and self-retweets are excluded and
    tallied. Malformed records are tallied; if they exceed
    ``max_error_fraction`` of all records a :class:`DataError` is raised.
    """
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    if isinstance(stream, io.BufferedIOBase) or (
        hasattr(stream, "mode") and "b" in getattr(stream, "mode", "")
    ):
        stream = io.TextIOWrapper(stream, encoding="utf-8", newline="")

    stats = ParseStats()
    events: list[RetweetEvent] = []
    for lineno, rec, err in _records(stream, fmt):
        stats.records += 1
        if err is None:
            try:
                retweeter = rec["retweeter"]
                influencer = rec["influencer"]
                raw_ts = rec["ts"]
            except KeyError as exc:
                err = f"missing field {exc.args[0]!r}"
        if err is None:
            if retweeter in (None, "") or influencer in (None, ""):
                err = "empty user id"
            else:
                try:
                    ts = _as_int(raw_ts)
                except (TypeError, ValueError):
                    err = f"bad timestamp {raw_ts!r}"
        if err is not None:
            stats.malformed += 1
            stats.errors.append((lineno, err))
            continue
        retweeter, influencer = str(retweeter), str(influencer)
        if retweeter == influencer:
            stats.self_retweets += 1
            continue
        if not spec.start <= ts < spec.end:
            stats.out_of_range += 1
            continue
        events.append(RetweetEvent(retweeter, influencer, ts, spec.sample_id))
        stats.accepted += 1

    if stats.records and stats.malformed / stats.records > max_error_fraction:
        first = "; ".join(f"line {n}: {e}" for n, e in stats.errors[:3])
        raise DataError(
            f"{stats.malformed}/{stats.records} malformed records in sample "
            f"{spec.sample_id!r} exceed limit {max_error_fraction:g} ({first})"
        )
    if stats.malformed:
        log.warning("stage=ingest event=malformed sample=%s count=%d", spec.sample_id, stats.malformed)
    return events, stats


def _as_int(value) -> int:
    if isinstance(value, bool):
        raise TypeError(value)
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if not value.is_integer():
            raise ValueError(value)
        return int(value)
    return int(str(value).strip())


def parse_files(paths: Iterable, fmt: str, spec: SampleSpec, max_error_fraction: float = 0.01):
    """Parse several files in path-sorted order and merge their tallies."""
    events: list[RetweetEvent] = []
    total = ParseStats()
    for path in sorted(str(p) for p in paths):
        try:
            fh = open(path, encoding="utf-8", newline="")
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc}") from exc
        with fh:
            evs, st = parse_events(fh, fmt, spec, max_error_fraction)
        events.extend(evs)
        for key in ("records", "accepted", "malformed", "out_of_range", "self_retweets"):
            setattr(total, key, getattr(total, key) + getattr(st, key))
        total.errors.extend((f"{path}:{n}", e) for n, e in st.errors)
    return events, total


def read_active_users(path) -> set[str]:
    users = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                users.add(line)
    return users


def active_from_min_events(events: Iterable[RetweetEvent], min_events: int) -> set[str]:
    counts = Counter(e.retweeter_id for e in events)
    return {u for u, c in counts.items() if c >= min_events}


def filter_persistent(events: Sequence[RetweetEvent], active_users) -> list[RetweetEvent]:
    """Keep events whose retweeter is in ``active_users``; influencers are not filtered."""
    if not active_users:
        raise ConfigError("active user set is empty; this would remove every event")
    return [e for e in events if e.retweeter_id in active_users]


def partition_windows(
    events: Sequence[RetweetEvent],
    start: int,
    end: int,
    window_len: int = 7 * DAY,
    step: int | None = None,
    sample_id: str | None = None,
) -> list[tuple[TimeWindow, list[RetweetEvent]]]:
    """Split one sample's events into windows of ``window_len`` seconds every ``step``.

    Windows start at ``start + i*step`` and are added until ``[start, end)`` is
    covered, so the last window may extend past ``end``. An event falls in
    every window containing its timestamp. Empty windows are kept (flagged).
    """
    step = window_len if step is None else step
    if window_len <= 0 or step <= 0:
        raise ConfigError("window length and step must be positive")
    if step > window_len:
        raise ConfigError(f"window step {step} exceeds window length {window_len}; events would be dropped")
    if not start < end:
        raise ConfigError("window range start must precede end")
    ids = {e.sample_id for e in events}
    if len(ids) > 1:
        raise DataError(f"events from several samples passed to partition_windows: {sorted(ids)}")
    sample_id = sample_id or (ids.pop() if ids else "")

    span = end - start
    n = 1 if span <= window_len else math.ceil((span - window_len) / step) + 1
    buckets: list[list[RetweetEvent]] = [[] for _ in range(n)]
    for e in events:
        off = e.timestamp - start
        if off < 0 or e.timestamp >= end:
            continue
        # windows i with i*step <= off < i*step + window_len
        hi = min(off // step, n - 1)
        lo = max(0, (off - window_len) // step + 1)
        for i in range(lo, hi + 1):
            buckets[i].append(e)
    out = []
    for i, evs in enumerate(buckets):
        ws = start + i * step
        out.append((TimeWindow(sample_id, i, ws, ws + window_len, empty=not evs), evs))
    return out


def write_events(events: Iterable[RetweetEvent], path) -> None:
    """Write the normalized event schema: jsonl with ``sample`` key."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in events:
            fh.write(
                json.dumps(
                    {"retweeter": e.retweeter_id, "influencer": e.influencer_id, "ts": e.timestamp, "sample": e.sample_id},
                    separators=(",", ":"),
                )
            )
            fh.write("\n")


def read_events(path, sample_id: str | None = None) -> list[RetweetEvent]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            sid = rec.get("sample", sample_id)
            if sid is None:
                raise DataError(f"{path}: record lacks a sample label")
            out.append(RetweetEvent(str(rec["retweeter"]), str(rec["influencer"]), int(rec["ts"]), sid))
    return out
