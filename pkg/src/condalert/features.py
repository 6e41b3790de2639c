"""Segmentation of patient records into daily state instances and featurization.

Every record is cut at a daily anchor (08:00 by default).  The state at an
anchor ``t`` summarizes all events at or before ``t``; the action vector
records which labs were ordered and which medications were given in the
follow-up window ``[t, t + period)``.  All durations are in hours.
"""

from __future__ import annotations

import hashlib
import json
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from datetime import datetime, time, timedelta
from typing import Sequence

import numpy as np

from .records import CohortDataset, PatientRecord

MISSING = math.nan
EPOCH = datetime(2000, 1, 1)
OTHER_TOKEN = "__other__"

CONTINUOUS_LAB_FEATURES = (
    "last", "second_last", "first", "last_diff", "last_pct_change",
    "last_slope", "nadir", "nadir_diff", "nadir_pct_diff", "time_since_nadir",
    "apex", "apex_diff", "apex_pct_diff", "time_since_apex", "baseline_diff",
    "baseline_pct_diff", "overall_slope", "time_since_last", "time_since_first",
    "time_between_last_two", "count", "mean", "std", "ever_measured",
    "pending", "measured_last_period",
)
CATEGORICAL_LAB_FEATURES = (
    "last", "second_last", "first", "time_since_last", "ever_performed",
    "pending", "time_since_first",
)
MEDICATION_FEATURES = ("on", "time_since_first", "time_since_last", "time_since_change")
PROCEDURE_FEATURES = ("ever", "time_since_first", "time_since_last")
CONTEXT_GROUP = "context"

_BINARY_LAB = {"ever_measured", "pending", "measured_last_period"}


def hours(ts: datetime) -> float:
    return (ts - EPOCH).total_seconds() / 3600.0


def _ratio(num: float, den: float) -> float:
    return num / den if den != 0 else MISSING


# --- per-channel extractors -------------------------------------------------------

def extract_continuous_lab_features(series: Sequence[tuple[float, float]], t: float,
                                    pending: bool = False,
                                    period: float = 24.0) -> np.ndarray:
    """The 26 summary features of a numeric lab series observed up to ``t``.

    ``series`` holds ``(time, value)`` pairs with times at or before ``t``.
    Missing entries are NaN; percentage features are missing when their
    denominator is zero.
    """
    out = np.full(len(CONTINUOUS_LAB_FEATURES), MISSING)
    out[20] = 0.0
    out[23] = 0.0
    out[24] = float(pending)
    out[25] = 0.0
    if len(series) == 0:
        return out
    times = np.array([s[0] for s in series], dtype=float)
    vals = np.array([s[1] for s in series], dtype=float)
    order = np.argsort(times, kind="stable")
    times, vals = times[order], vals[order]

    last, t_last = vals[-1], times[-1]
    first, t_first = vals[0], times[0]
    nadir, apex = vals.min(), vals.max()
    # most recent occurrence of the extreme
    t_nadir = times[len(vals) - 1 - np.argmin(vals[::-1])]
    t_apex = times[len(vals) - 1 - np.argmax(vals[::-1])]

    out[0] = last
    out[2] = first
    out[6] = nadir
    out[7] = last - nadir
    out[8] = _ratio(last - nadir, nadir)
    out[9] = t - t_nadir
    out[10] = apex
    out[11] = last - apex
    out[12] = _ratio(last - apex, apex)
    out[13] = t - t_apex
    out[17] = t - t_last
    out[18] = t - t_first
    out[20] = len(vals)
    out[21] = vals.mean()
    out[23] = 1.0
    out[25] = float(t - t_last < period)
    if len(vals) >= 2:
        prev, t_prev = vals[-2], times[-2]
        out[1] = prev
        out[3] = last - prev
        out[4] = _ratio(last - prev, prev)
        out[5] = _ratio(last - prev, t_last - t_prev)
        out[14] = last - first
        out[15] = _ratio(last - first, first)
        out[16] = _ratio(last - first, t_last - t_first)
        out[19] = t_last - t_prev
        out[22] = vals.std(ddof=1)
    return out


def extract_categorical_lab_features(series: Sequence[tuple[float, str]], pending: bool,
                                     t: float) -> list:
    """Seven features of a token-valued lab; tokens are returned unencoded."""
    if not series:
        return [None, None, None, MISSING, False, bool(pending), MISSING]
    series = sorted(series, key=lambda s: s[0])
    return [
        series[-1][1],
        series[-2][1] if len(series) > 1 else None,
        series[0][1],
        t - series[-1][0],
        True,
        bool(pending),
        t - series[0][0],
    ]


def medication_order_changes(admin_times: Sequence[float], period: float = 24.0) -> list[float]:
    """Times at which a medication order starts or lapses.

    A start is an administration with no administration in the preceding
    ``period``; a lapse is ``period`` after an administration that has no
    follow-up within ``period``.
    """
    admin_times = sorted(admin_times)
    changes = []
    for i, a in enumerate(admin_times):
        if i == 0 or a - admin_times[i - 1] > period:
            changes.append(a)
        if i == len(admin_times) - 1 or admin_times[i + 1] - a > period:
            changes.append(a + period)
    return sorted(changes)


def extract_medication_features(admin_times: Sequence[float], order_changes: Sequence[float],
                                t: float, period: float = 24.0) -> np.ndarray:
    """Currently-on flag and times since first, last and last order change.

    "Currently on" means an administration within the trailing ``period``.
    """
    given = [a for a in admin_times if a <= t]
    if not given:
        return np.array([0.0, MISSING, MISSING, MISSING])
    changes = [c for c in order_changes if c <= t]
    return np.array([
        float(t - max(given) < period),
        t - min(given),
        t - max(given),
        t - max(changes) if changes else MISSING,
    ])


def extract_procedure_features(proc_times: Sequence[float], t: float) -> np.ndarray:
    done = [p for p in proc_times if p <= t]
    if not done:
        return np.array([0.0, MISSING, MISSING])
    return np.array([1.0, t - min(done), t - max(done)])


# --- catalogs ----------------------------------------------------------------

@dataclass(frozen=True)
class FeatureDescriptor:
    group: str
    name: str
    units: str = ""
    kind: str = "real"  # real | binary | missing

    @property
    def label(self) -> str:
        return f"{self.group}:{self.name}"


@dataclass(frozen=True)
class FeatureCatalog:
    descriptors: tuple[FeatureDescriptor, ...]

    def __len__(self):
        return len(self.descriptors)

    @property
    def groups(self) -> list[str]:
        seen = {}
        for d in self.descriptors:
            seen.setdefault(d.group, None)
        return list(seen)

    def group_columns(self) -> dict[str, np.ndarray]:
        cols: dict[str, list[int]] = {}
        for i, d in enumerate(self.descriptors):
            cols.setdefault(d.group, []).append(i)
        return {g: np.array(c, dtype=int) for g, c in cols.items()}

    def labels(self) -> list[str]:
        return [d.label for d in self.descriptors]

    def fingerprint(self) -> str:
        text = "\n".join(f"{d.label}|{d.kind}" for d in self.descriptors)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ActionDescriptor:
    action_kind: str  # lab_order | medication_given
    code: str

    @property
    def label(self) -> str:
        return f"{self.action_kind}:{self.code}"

    @classmethod
    def from_label(cls, label: str) -> "ActionDescriptor":
        kind, code = label.split(":", 1)
        return cls(kind, code)


@dataclass
class PatientInstance:
    patient_id: str
    segment_time: datetime
    features: np.ndarray
    actions: np.ndarray
    prev: "PatientInstance | None" = field(default=None, repr=False)


@dataclass
class InstanceSet:
    """Instances of a cohort stacked row-wise."""

    X: np.ndarray
    Y: np.ndarray
    patient_ids: list[str]
    times: list[datetime]
    prev_index: np.ndarray
    catalog: FeatureCatalog
    actions: tuple[ActionDescriptor, ...]

    def __len__(self):
        return self.X.shape[0]

    def instances(self) -> list[PatientInstance]:
        out = []
        for i in range(len(self)):
            p = self.prev_index[i]
            out.append(PatientInstance(self.patient_ids[i], self.times[i], self.X[i],
                                       self.Y[i], out[p] if p >= 0 else None))
        return out


# --- segmentation ------------------------------------------------------------

def segment_times(rec: PatientRecord, anchor: time = time(8, 0),
                  period: timedelta = timedelta(hours=24)) -> list[datetime]:
    """Anchor crossings ``t`` with ``admission <= t < discharge``."""
    if period <= timedelta(0):
        raise ValueError("period must be positive")
    t = datetime.combine(rec.admission_time.date(), anchor)
    while t - period >= rec.admission_time:
        t -= period
    while t < rec.admission_time:
        t += period
    out = []
    while t < rec.discharge_time:
        out.append(t)
        t += period
    return out


class _RecordIndex:
    """Per-channel event arrays of one record, in hours."""

    def __init__(self, rec: PatientRecord):
        labs: dict[str, list] = {}
        pend: dict[str, list] = {}
        orders: dict[str, list] = {}
        meds: dict[str, list] = {}
        procs: dict[str, list] = {}
        for ev in rec.events:
            h = hours(ev.timestamp)
            if ev.channel_kind == "lab":
                orders.setdefault(ev.code, []).append(h)
                pend.setdefault(ev.code, []).append((h, ev.order_status == "pending"
                                                     and ev.value is None))
                if ev.value is not None:
                    labs.setdefault(ev.code, []).append((h, ev.value))
            elif ev.channel_kind == "medication":
                meds.setdefault(ev.code, []).append(h)
            elif ev.channel_kind == "procedure":
                procs.setdefault(ev.code, []).append(h)
        self.labs = labs
        self.lab_times = {k: [s[0] for s in v] for k, v in labs.items()}
        self.pending = pend
        self.pending_times = {k: [s[0] for s in v] for k, v in pend.items()}
        self.orders = orders
        self.meds = meds
        self.procs = procs

    def lab_series(self, code: str, t: float) -> list:
        times = self.lab_times.get(code)
        if not times:
            return []
        return self.labs[code][:bisect_right(times, t)]

    def is_pending(self, code: str, t: float) -> bool:
        times = self.pending_times.get(code)
        if not times:
            return False
        k = bisect_right(times, t)
        return k > 0 and self.pending[code][k - 1][1]


def _count_in_window(times: list[float], lo: float, hi: float) -> bool:
    if not times:
        return False
    k = bisect_right(times, lo - 1e-9)
    return k < len(times) and times[k] < hi


class Featurizer:
    """Feature and action layout learned from a (training) cohort."""

    def __init__(self, continuous_labs, categorical_labs, medications, procedures,
                 vocab, sexes, races, anchor=time(8, 0), period_hours=24.0):
        self.continuous_labs = tuple(sorted(continuous_labs))
        self.categorical_labs = tuple(sorted(categorical_labs))
        self.medications = tuple(sorted(medications))
        self.procedures = tuple(sorted(procedures))
        self.vocab = {k: tuple(sorted(v)) for k, v in sorted(vocab.items())}
        self.sexes = tuple(sorted(sexes))
        self.races = tuple(sorted(races))
        self.anchor = anchor
        self.period_hours = float(period_hours)
        self.catalog = self._build_catalog()
        self.actions = tuple(
            [ActionDescriptor("lab_order", c)
             for c in sorted(self.continuous_labs + self.categorical_labs)]
            + [ActionDescriptor("medication_given", c) for c in self.medications])

    @property
    def period(self) -> timedelta:
        return timedelta(hours=self.period_hours)

    @classmethod
    def from_cohort(cls, ds: CohortDataset, anchor=time(8, 0), period_hours=24.0) -> "Featurizer":
        labs, token = set(), set()
        vocab: dict[str, set] = {}
        meds, procs = set(), set()
        for rec in ds.records:
            for ev in rec.events:
                if ev.channel_kind == "lab":
                    labs.add(ev.code)
                    if isinstance(ev.value, str):
                        token.add(ev.code)
                        vocab.setdefault(ev.code, set()).add(ev.value)
                elif ev.channel_kind == "medication":
                    meds.add(ev.code)
                elif ev.channel_kind == "procedure":
                    procs.add(ev.code)
        return cls(labs - token, token, meds, procs, vocab,
                   {r.demographics.sex for r in ds.records},
                   {r.demographics.race for r in ds.records},
                   anchor, period_hours)

    def _build_catalog(self) -> FeatureCatalog:
        d = []
        g = CONTEXT_GROUP
        d += [FeatureDescriptor(g, f"sex={s}", kind="binary") for s in self.sexes + (OTHER_TOKEN,)]
        d.append(FeatureDescriptor(g, "age", "years"))
        d += [FeatureDescriptor(g, f"race={r}", kind="binary") for r in self.races + (OTHER_TOKEN,)]
        d += [FeatureDescriptor(g, f"device{i}", kind="binary") for i in range(4)]
        for code in sorted(self.continuous_labs + self.categorical_labs):
            g = f"lab:{code}"
            if code in self.continuous_labs:
                for name in CONTINUOUS_LAB_FEATURES:
                    binary = name in _BINARY_LAB
                    units = "h" if "time" in name else ("/h" if "slope" in name else "")
                    d.append(FeatureDescriptor(g, name, units, "binary" if binary else "real"))
            else:
                for slot in ("last", "second_last", "first"):
                    for tok in self.vocab[code] + (OTHER_TOKEN,):
                        d.append(FeatureDescriptor(g, f"{slot}={tok}", kind="binary"))
                d.append(FeatureDescriptor(g, "time_since_last", "h"))
                d.append(FeatureDescriptor(g, "ever_performed", kind="binary"))
                d.append(FeatureDescriptor(g, "pending", kind="binary"))
                d.append(FeatureDescriptor(g, "time_since_first", "h"))
            d.append(FeatureDescriptor(g, "missing", kind="missing"))
        for code in self.medications:
            g = f"med:{code}"
            d.append(FeatureDescriptor(g, "on", kind="binary"))
            d += [FeatureDescriptor(g, n, "h") for n in MEDICATION_FEATURES[1:]]
            d.append(FeatureDescriptor(g, "missing", kind="missing"))
        for code in self.procedures:
            g = f"proc:{code}"
            d.append(FeatureDescriptor(g, "ever", kind="binary"))
            d += [FeatureDescriptor(g, n, "h") for n in PROCEDURE_FEATURES[1:]]
            d.append(FeatureDescriptor(g, "missing", kind="missing"))
        return FeatureCatalog(tuple(d))

    def _onehot(self, options: tuple, value) -> list[float]:
        row = [0.0] * (len(options) + 1)
        if value is not None:
            row[options.index(value) if value in options else len(options)] = 1.0
        return row

    def state_vector(self, rec: PatientRecord, t: float, idx: _RecordIndex | None = None) -> np.ndarray:
        """Raw (unstandardized) feature vector at time ``t`` (hours)."""
        idx = idx or _RecordIndex(rec)
        p = self.period_hours
        row: list[float] = []
        row += self._onehot(self.sexes, rec.demographics.sex)
        row.append(float(rec.demographics.age))
        row += self._onehot(self.races, rec.demographics.race)
        row += [float(f) for f in rec.device_flags]
        for code in sorted(self.continuous_labs + self.categorical_labs):
            series = idx.lab_series(code, t)
            pending = idx.is_pending(code, t)
            if code in self.continuous_labs:
                series = [s for s in series if not isinstance(s[1], str)]
                row += extract_continuous_lab_features(series, t, pending, p).tolist()
            else:
                series = [s for s in series if isinstance(s[1], str)]
                last, second, first, since_last, ever, pend, since_first = \
                    extract_categorical_lab_features(series, pending, t)
                voc = self.vocab[code]
                row += self._onehot(voc, last) + self._onehot(voc, second) + self._onehot(voc, first)
                row += [since_last, float(ever), float(pend), since_first]
            row.append(0.0)
        for code in self.medications:
            admins = idx.meds.get(code, [])
            row += extract_medication_features(admins, medication_order_changes(admins, p), t, p).tolist()
            row.append(0.0)
        for code in self.procedures:
            row += extract_procedure_features(idx.procs.get(code, []), t).tolist()
            row.append(0.0)
        return np.array(row, dtype=float)

    def action_vector(self, rec: PatientRecord, t: float, idx: _RecordIndex | None = None) -> np.ndarray:
        idx = idx or _RecordIndex(rec)
        hi = t + self.period_hours
        out = np.zeros(len(self.actions), dtype=bool)
        for j, a in enumerate(self.actions):
            times = idx.orders.get(a.code, []) if a.action_kind == "lab_order" else idx.meds.get(a.code, [])
            out[j] = _count_in_window(times, t, hi)
        return out

    def segment_record(self, rec: PatientRecord) -> list[PatientInstance]:
        idx = _RecordIndex(rec)
        out: list[PatientInstance] = []
        for ts in segment_times(rec, self.anchor, self.period):
            t = hours(ts)
            prev = out[-1] if out and out[-1].segment_time == ts - self.period else None
            out.append(PatientInstance(rec.patient_id, ts, self.state_vector(rec, t, idx),
                                       self.action_vector(rec, t, idx), prev))
        return out

    def featurize(self, ds: CohortDataset) -> InstanceSet:
        rows, acts, pids, times, prev = [], [], [], [], []
        for rec in ds.records:
            start = len(rows)
            insts = self.segment_record(rec)
            for k, inst in enumerate(insts):
                rows.append(inst.features)
                acts.append(inst.actions)
                pids.append(inst.patient_id)
                times.append(inst.segment_time)
                prev.append(start + k - 1 if inst.prev is not None else -1)
        d, a = len(self.catalog), len(self.actions)
        X = np.vstack(rows) if rows else np.zeros((0, d))
        Y = np.vstack(acts) if acts else np.zeros((0, a), dtype=bool)
        return InstanceSet(X, Y, pids, times, np.array(prev, dtype=int), self.catalog, self.actions)

    def to_dict(self) -> dict:
        return {
            "continuous_labs": list(self.continuous_labs),
            "categorical_labs": list(self.categorical_labs),
            "medications": list(self.medications),
            "procedures": list(self.procedures),
            "vocab": {k: list(v) for k, v in self.vocab.items()},
            "sexes": list(self.sexes),
            "races": list(self.races),
            "anchor": self.anchor.strftime("%H:%M"),
            "period_hours": self.period_hours,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Featurizer":
        return cls(d["continuous_labs"], d["categorical_labs"], d["medications"],
                   d["procedures"], d["vocab"], d["sexes"], d["races"],
                   time.fromisoformat(d["anchor"]), d["period_hours"])


def segment_record(rec: PatientRecord, anchor: time = time(8, 0),
                   period: timedelta = timedelta(hours=24),
                   featurizer: Featurizer | None = None) -> list[PatientInstance]:
    """Cut one record into patient-state instances.

    Without an explicit ``featurizer`` the layout is derived from the record
    alone, which is convenient for inspection but not comparable across
    patients.
    """
    if featurizer is None:
        featurizer = Featurizer.from_cohort(CohortDataset.from_records([rec]), anchor,
                                            period.total_seconds() / 3600.0)
    return featurizer.segment_record(rec)


def build_action_vector(rec: PatientRecord, t: datetime, period: timedelta,
                        action_catalog: Sequence[ActionDescriptor]) -> np.ndarray:
    """True for each action with a matching event in ``[t, t + period)``."""
    idx = _RecordIndex(rec)
    lo = hours(t)
    hi = lo + period.total_seconds() / 3600.0
    return np.array([
        _count_in_window(idx.orders.get(a.code, []) if a.action_kind == "lab_order"
                         else idx.meds.get(a.code, []), lo, hi)
        for a in action_catalog], dtype=bool)


# --- standardization ---------------------------------------------------------

@dataclass
class Scaler:
    mean: np.ndarray
    scale: np.ndarray
    catalog: FeatureCatalog

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[1] != len(self.catalog):
            raise ValueError(f"expected {len(self.catalog)} features, got {X.shape[1]}")
        kinds = np.array([d.kind for d in self.catalog.descriptors])
        real = kinds == "real"
        Z = X.copy()
        with np.errstate(invalid="ignore"):
            Z[:, real] = np.where(self.scale[real] > 0,
                                  (X[:, real] - self.mean[real]) / np.where(self.scale[real] > 0, self.scale[real], 1.0),
                                  0.0)
        missing = np.isnan(X)
        for g, cols in self.catalog.group_columns().items():
            ind = [c for c in cols if kinds[c] == "missing"]
            if ind:
                Z[:, ind[0]] = missing[:, cols].any(axis=1)
        Z[np.isnan(Z)] = 0.0
        return Z

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}


def fit_scaler(X: np.ndarray, catalog: FeatureCatalog) -> Scaler:
    """Column mean/std over observed (non-NaN) training values."""
    X = np.asarray(X, dtype=float)
    n_obs = (~np.isnan(X)).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(n_obs > 0, np.nansum(X, axis=0) / np.maximum(n_obs, 1), 0.0)
        var = np.where(n_obs > 0, np.nansum((X - mean) ** 2, axis=0) / np.maximum(n_obs, 1), 0.0)
    scale = np.sqrt(var)
    scale[scale < 1e-12] = 0.0
    return Scaler(mean, scale, catalog)


def standardize(train: InstanceSet, apply_to: InstanceSet | None = None):
    """Z-score with training statistics; returns ``(standardized, scaler)``.

    NaN entries become 0 and raise the group's missingness indicator.
    """
    scaler = fit_scaler(train.X, train.catalog)
    target = train if apply_to is None else apply_to
    out = InstanceSet(scaler.transform(target.X), target.Y, target.patient_ids,
                      target.times, target.prev_index, target.catalog, target.actions)
    return out, scaler


def export_instances(inst: InstanceSet, matrix_path, catalog_path) -> None:
    """Write a dense CSV matrix and a JSON catalog sidecar."""
    header = ["patient_id", "segment_time"] + inst.catalog.labels() + [a.label for a in inst.actions]
    with open(matrix_path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(len(inst)):
            vals = [inst.patient_ids[i], inst.times[i].strftime("%Y-%m-%dT%H:%M")]
            vals += ["" if np.isnan(v) else repr(float(v)) for v in inst.X[i]]
            vals += [str(int(v)) for v in inst.Y[i]]
            fh.write(",".join(vals) + "\n")
    doc = {"features": [{"group": d.group, "name": d.name, "units": d.units, "kind": d.kind}
                        for d in inst.catalog.descriptors],
           "groups": inst.catalog.groups,
           "actions": [a.label for a in inst.actions],
           "fingerprint": inst.catalog.fingerprint()}
    with open(catalog_path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
