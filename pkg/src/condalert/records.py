"""Temporal patient records: types, JSONL/CSV parsing, filtering and splitting.

Timestamps are naive ``datetime`` objects truncated to the minute.  A cohort
file mixes patient header lines (``"kind": "patient"``) with event lines::

    {"kind": "patient", "patient_id": "p1", "admission": "2004-01-01T10:00",
     "discharge": "2004-01-04T12:00", "sex": "F", "age": 64, "race": "white",
     "devices": [0, 1, 0, 0]}
    {"patient_id": "p1", "ts": "2004-01-01T11:30", "kind": "lab",
     "code": "PLT", "value": 182.0, "status": "resulted"}
"""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import IO, Iterable, Union

CHANNEL_KINDS = ("lab", "medication", "procedure", "device")
ORDER_STATUSES = ("resulted", "pending")
CSV_COLUMNS = (
    "kind", "patient_id", "ts", "code", "value", "status",
    "admission", "discharge", "sex", "age", "race", "devices",
)

Value = Union[float, str, None]


class CohortParseError(ValueError):
    """Raised for input that cannot be decoded; carries the offending line."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def parse_time(text: str) -> datetime:
    ts = datetime.fromisoformat(str(text).strip())
    if ts.tzinfo is not None:
        ts = ts.replace(tzinfo=None)
    return ts.replace(second=0, microsecond=0)


def format_time(ts: datetime) -> str:
    return ts.strftime("%Y-%m-%dT%H:%M")


@dataclass(frozen=True)
class RawEvent:
    patient_id: str
    timestamp: datetime
    channel_kind: str
    code: str
    value: Value = None
    order_status: str | None = None

    def __post_init__(self):
        if self.channel_kind not in CHANNEL_KINDS:
            raise ValueError(f"unknown channel kind {self.channel_kind!r}")
        if self.channel_kind == "lab":
            if self.value is None and self.order_status is None:
                raise ValueError("lab event needs a value or an order status")
            if self.order_status is not None and self.order_status not in ORDER_STATUSES:
                raise ValueError(f"unknown order status {self.order_status!r}")
            if isinstance(self.value, float) and self.value != self.value:
                raise ValueError("lab value is NaN")
        elif self.value is not None or self.order_status is not None:
            raise ValueError(f"{self.channel_kind} events carry no value")


@dataclass(frozen=True)
class Demographics:
    sex: str
    age: float
    race: str

    def __post_init__(self):
        if not 0 <= self.age < 150:
            raise ValueError(f"age {self.age} outside [0, 150)")


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    admission_time: datetime
    discharge_time: datetime
    demographics: Demographics
    events: tuple[RawEvent, ...] = ()
    device_flags: tuple[bool, bool, bool, bool] = (False, False, False, False)

    def __post_init__(self):
        if len(self.device_flags) != 4:
            raise ValueError("device_flags must have exactly 4 entries")
        if self.discharge_time < self.admission_time:
            raise ValueError(f"{self.patient_id}: discharge before admission")
        prev = None
        for ev in self.events:
            if prev is not None and ev.timestamp < prev:
                raise ValueError(f"{self.patient_id}: events not sorted")
            if not self.admission_time <= ev.timestamp <= self.discharge_time:
                raise ValueError(
                    f"{self.patient_id}: event at {format_time(ev.timestamp)} "
                    "outside the stay")
            prev = ev.timestamp

    def events_of(self, kind: str, code: str | None = None) -> list[RawEvent]:
        return [e for e in self.events
                if e.channel_kind == kind and (code is None or e.code == code)]


def build_catalog(records: Iterable[PatientRecord]) -> dict[tuple[str, str], int]:
    """Distinct-patient usage count per (kind, code)."""
    counts: dict[tuple[str, str], int] = defaultdict(int)
    for rec in records:
        for key in {(e.channel_kind, e.code) for e in rec.events}:
            counts[key] += 1
    return dict(sorted(counts.items()))


@dataclass(frozen=True)
class CohortDataset:
    records: tuple[PatientRecord, ...] = ()
    channel_catalog: dict = field(default_factory=dict)
    rejected: tuple[tuple[int, str], ...] = field(default=(), compare=False)

    def __post_init__(self):
        ids = [r.patient_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate patient ids in cohort")
        if not self.channel_catalog and self.records:
            object.__setattr__(self, "channel_catalog", build_catalog(self.records))

    @classmethod
    def from_records(cls, records: Iterable[PatientRecord], rejected=()) -> "CohortDataset":
        records = tuple(records)
        return cls(records, build_catalog(records), tuple(rejected))

    def __len__(self):
        return len(self.records)

    def patient_ids(self) -> list[str]:
        return [r.patient_id for r in self.records]


# --- parsing -----------------------------------------------------------------

def _coerce_value(raw) -> Value:
    if raw is None or raw == "":
        return None
    if isinstance(raw, bool):
        raise ValueError("boolean lab values are not supported")
    if isinstance(raw, (int, float)):
        return float(raw)
    try:
        return float(raw)
    except ValueError:
        return str(raw)


def _header_from(row: dict, line_no: int) -> tuple[str, datetime, datetime, Demographics, tuple]:
    devices = row.get("devices") or [0, 0, 0, 0]
    if isinstance(devices, str):
        devices = [c == "1" for c in devices.strip()]
    devices = tuple(bool(d) for d in devices)
    if len(devices) != 4:
        raise CohortParseError(line_no, "devices must list 4 flags")
    try:
        demo = Demographics(str(row.get("sex") or "U"), float(row.get("age") or 0.0),
                            str(row.get("race") or "U"))
        return (str(row["patient_id"]), parse_time(row["admission"]),
                parse_time(row["discharge"]), demo, devices)
    except (KeyError, ValueError, TypeError) as exc:
        raise CohortParseError(line_no, f"bad patient header: {exc}") from None


def _rows_jsonl(text: str):
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CohortParseError(line_no, f"invalid JSON ({exc.msg})") from None
        if not isinstance(row, dict):
            raise CohortParseError(line_no, "expected a JSON object")
        yield line_no, row


def _rows_csv(text: str):
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames and tuple(reader.fieldnames) != CSV_COLUMNS:
        raise CohortParseError(1, f"expected columns {','.join(CSV_COLUMNS)}")
    for i, row in enumerate(reader, start=2):
        yield i, {k: v for k, v in row.items() if v not in (None, "")}


def parse_events(source: Union[bytes, str, IO], format: str = "jsonl") -> CohortDataset:
    """Parse a cohort stream into a dataset grouped per patient.

    Events are sorted per patient.  Lines with an unknown channel kind, or
    events of patients without a header, are collected in ``rejected`` and
    otherwise skipped.  Undecodable lines raise :class:`CohortParseError`.
    """
    if hasattr(source, "read"):
        source = source.read()
    text = source.decode("utf-8") if isinstance(source, bytes) else source
    if format == "jsonl":
        rows = _rows_jsonl(text)
    elif format == "csv":
        rows = _rows_csv(text)
    else:
        raise ValueError(f"unsupported format {format!r}")

    headers = {}
    events = defaultdict(list)
    rejected = []
    for line_no, row in rows:
        kind = row.get("kind")
        if kind == "patient":
            pid, adm, dis, demo, devices = _header_from(row, line_no)
            if pid in headers:
                raise CohortParseError(line_no, f"duplicate header for {pid}")
            headers[pid] = (adm, dis, demo, devices)
            continue
        if kind not in CHANNEL_KINDS:
            rejected.append((line_no, f"unknown channel kind {kind!r}"))
            continue
        try:
            ts = parse_time(row["ts"])
        except (KeyError, ValueError, TypeError):
            raise CohortParseError(line_no, f"bad timestamp {row.get('ts')!r}") from None
        try:
            ev = RawEvent(str(row["patient_id"]), ts, kind, str(row["code"]),
                          _coerce_value(row.get("value")), row.get("status"))
        except (KeyError, ValueError) as exc:
            raise CohortParseError(line_no, str(exc)) from None
        events[ev.patient_id].append((line_no, ev))

    records = []
    for pid, (adm, dis, demo, devices) in headers.items():
        evs = sorted(events.pop(pid, []), key=lambda p: p[1].timestamp)
        kept = []
        for line_no, ev in evs:
            if adm <= ev.timestamp <= dis:
                kept.append(ev)
            else:
                rejected.append((line_no, f"event outside stay of {pid}"))
        records.append(PatientRecord(pid, adm, dis, demo, tuple(kept), devices))
    for pid, evs in events.items():
        rejected.extend((line_no, f"no header for patient {pid!r}") for line_no, _ in evs)
    records.sort(key=lambda r: r.patient_id)
    return CohortDataset.from_records(records, sorted(rejected))


def _event_row(ev: RawEvent) -> dict:
    row = {"patient_id": ev.patient_id, "ts": format_time(ev.timestamp),
           "kind": ev.channel_kind, "code": ev.code}
    if ev.value is not None:
        row["value"] = ev.value
    if ev.order_status is not None:
        row["status"] = ev.order_status
    return row


def _header_row(rec: PatientRecord) -> dict:
    return {"kind": "patient", "patient_id": rec.patient_id,
            "admission": format_time(rec.admission_time),
            "discharge": format_time(rec.discharge_time),
            "sex": rec.demographics.sex, "age": rec.demographics.age,
            "race": rec.demographics.race,
            "devices": [int(d) for d in rec.device_flags]}


def serialize(ds: CohortDataset, format: str = "jsonl") -> str:
    """Inverse of :func:`parse_events` (rejected lines are not preserved)."""
    rows = []
    for rec in ds.records:
        rows.append(_header_row(rec))
        rows.extend(_event_row(ev) for ev in rec.events)
    if format == "jsonl":
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    if format == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            r = dict(r)
            if "devices" in r:
                r["devices"] = "".join(str(d) for d in r["devices"])
            if isinstance(r.get("value"), float):
                r["value"] = repr(r["value"])
            writer.writerow(r)
        return buf.getvalue()
    raise ValueError(f"unsupported format {format!r}")


# --- cohort operations -----------------------------------------------------------

def rare_channels(ds: CohortDataset, min_patients: int) -> set[tuple[str, str]]:
    """Codes used by fewer than ``min_patients`` distinct patients."""
    return {key for key, n in ds.channel_catalog.items() if n < min_patients}


def filter_rare_channels(ds: CohortDataset, min_patients: int,
                         drop: set | None = None) -> CohortDataset:
    """Drop events on channels used by fewer than ``min_patients`` patients.

    ``drop`` overrides the computed set, so a filter derived on a training
    split can be applied unchanged to the test split.
    """
    if min_patients < 1:
        raise ValueError("min_patients must be >= 1")
    if drop is None:
        drop = rare_channels(ds, min_patients)
    if not drop:
        return ds
    records = [replace(r, events=tuple(e for e in r.events
                                       if (e.channel_kind, e.code) not in drop))
               for r in ds.records]
    return CohortDataset.from_records(records, ds.rejected)


def split_by_date(ds: CohortDataset, cutoff: datetime) -> tuple[CohortDataset, CohortDataset]:
    """Patients admitted strictly before ``cutoff`` train; the rest test."""
    train = [r for r in ds.records if r.admission_time < cutoff]
    test = [r for r in ds.records if r.admission_time >= cutoff]
    return CohortDataset.from_records(train), CohortDataset.from_records(test)


def load_cohort(path, format: str | None = None) -> CohortDataset:
    path = str(path)
    if format is None:
        format = "csv" if path.endswith(".csv") else "jsonl"
    with open(path, "rb") as fh:
        return parse_events(fh, format)
