"""Seeded synthetic cohorts with known action policies and injected anomalies.

Each patient carries latent conditions that push lab trajectories (Gaussian
random walks with condition-dependent drift).  At every daily segment the
generator evaluates policy rules on the *observable* history, draws the
intended actions, flips rule-governed actions with probability ``rho`` and
writes the executed actions into the event stream.  The ground truth records
intended and executed values for every (segment, action) slot.
"""

from __future__ import annotations

import copy
import csv
import io
import json
from dataclasses import dataclass, field, replace
from datetime import datetime, time, timedelta

import numpy as np

from .records import CohortDataset, Demographics, PatientRecord, RawEvent, format_time

ANCHOR = time(8, 0)
PERIOD_H = 24.0


class SpecValidationError(ValueError):
    def __init__(self, fields: list[str]):
        super().__init__("invalid cohort spec: " + "; ".join(fields))
        self.fields = fields


@dataclass
class LabSpec:
    code: str
    mean: float = 0.0
    sd: float = 1.0
    walk_sd: float = 0.0
    noise_sd: float = 0.0
    measure_prob: float = 0.5
    drift: dict = field(default_factory=dict)      # condition -> change per day
    treatment: dict = field(default_factory=dict)  # medication -> change per dose
    tokens: tuple | None = None                    # categorical: (negative, positive)
    positive_if: str | None = None                 # condition making the token positive


@dataclass
class MedSpec:
    code: str
    base_prob: float = 0.05
    regime: str | None = None       # condition under which regime_prob applies
    regime_prob: float = 0.0


@dataclass
class ProcSpec:
    code: str
    prob: float = 0.5


@dataclass
class PolicyRule:
    """Fire ``action`` with probability ``p`` when every clause holds.

    Clauses are dicts: ``{"lab": code, "op": "<" | ">", "value": x}`` on the
    last observed value, or ``{"on_medication": code, "min_days": d}``.
    When the predicate is false the action occurs with ``p_else``.
    """

    name: str
    action: str                      # "lab_order:CODE" | "medication_given:CODE"
    clauses: list = field(default_factory=list)
    p: float = 1.0
    p_else: float = 0.0


@dataclass
class CohortSpec:
    n_patients: int = 500
    stay_days: tuple = (3, 9)
    start: str = "2003-01-01"
    end: str = "2006-12-31"
    conditions: dict = field(default_factory=dict)   # name -> (prevalence, onset_max_day, requires)
    labs: list = field(default_factory=list)
    medications: list = field(default_factory=list)
    procedures: list = field(default_factory=list)
    rules: list = field(default_factory=list)
    rho: float = 0.05
    pending_prob: float = 0.2
    seed: int = 1

    def validate(self) -> None:
        bad = []
        if self.n_patients < 0:
            bad.append("n_patients must be >= 0")
        if not (1 <= self.stay_days[0] <= self.stay_days[1]):
            bad.append("stay_days must satisfy 1 <= min <= max")
        if not 0.0 <= self.rho <= 0.5:
            bad.append("rho must lie in [0, 0.5]")
        if not 0.0 <= self.pending_prob <= 1.0:
            bad.append("pending_prob must lie in [0, 1]")
        try:
            if datetime.fromisoformat(self.start) > datetime.fromisoformat(self.end):
                bad.append("start after end")
        except ValueError:
            bad.append("start/end must be ISO dates")
        lab_codes = {lab.code for lab in self.labs}
        med_codes = {m.code for m in self.medications}
        for name, (prev, onset, _req) in self.conditions.items():
            if not 0.0 <= prev <= 1.0 or onset < 0:
                bad.append(f"condition {name}: prevalence in [0,1], onset >= 0")
        for lab in self.labs:
            if lab.sd < 0 or lab.walk_sd < 0 or lab.noise_sd < 0:
                bad.append(f"lab {lab.code}: standard deviations must be >= 0")
            if not 0.0 <= lab.measure_prob <= 1.0:
                bad.append(f"lab {lab.code}: measure_prob in [0, 1]")
        for med in self.medications:
            if not (0 <= med.base_prob <= 1 and 0 <= med.regime_prob <= 1):
                bad.append(f"medication {med.code}: probabilities in [0, 1]")
        for proc in self.procedures:
            if not 0 <= proc.prob <= 1:
                bad.append(f"procedure {proc.code}: prob in [0, 1]")
        for rule in self.rules:
            if not (0 <= rule.p <= 1 and 0 <= rule.p_else <= 1):
                bad.append(f"rule {rule.name}: probabilities in [0, 1]")
            kind, _, code = rule.action.partition(":")
            if (kind, code in lab_codes, code in med_codes) not in (
                    ("lab_order", True, False), ("medication_given", False, True)):
                bad.append(f"rule {rule.name}: unknown action {rule.action!r}")
            for c in rule.clauses:
                if "lab" in c and (c["lab"] not in lab_codes or c.get("op") not in ("<", ">")):
                    bad.append(f"rule {rule.name}: bad lab clause {c}")
                elif "on_medication" in c and c["on_medication"] not in med_codes:
                    bad.append(f"rule {rule.name}: bad medication clause {c}")
                elif "lab" not in c and "on_medication" not in c:
                    bad.append(f"rule {rule.name}: unknown clause {c}")
        if bad:
            raise SpecValidationError(bad)

    def to_dict(self) -> dict:
        d = {
            "n_patients": self.n_patients, "stay_days": list(self.stay_days),
            "start": self.start, "end": self.end,
            "conditions": {k: list(v) for k, v in self.conditions.items()},
            "labs": [_lab_dict(lab) for lab in self.labs],
            "medications": [vars(m).copy() for m in self.medications],
            "procedures": [vars(p).copy() for p in self.procedures],
            "rules": [copy.deepcopy(vars(r)) for r in self.rules],
            "rho": self.rho, "pending_prob": self.pending_prob, "seed": self.seed,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSpec":
        known = {"n_patients", "stay_days", "start", "end", "conditions", "labs",
                 "medications", "procedures", "rules", "rho", "pending_prob", "seed"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise SpecValidationError([f"unknown field {k!r}" for k in unknown])
        try:
            spec = cls(
                n_patients=int(d.get("n_patients", 500)),
                stay_days=tuple(d.get("stay_days", (3, 9))),
                start=str(d.get("start", "2003-01-01")),
                end=str(d.get("end", "2006-12-31")),
                conditions={k: tuple(v) for k, v in d.get("conditions", {}).items()},
                labs=[LabSpec(**{**x, "tokens": tuple(x["tokens"]) if x.get("tokens") else None})
                      for x in d.get("labs", [])],
                medications=[MedSpec(**x) for x in d.get("medications", [])],
                procedures=[ProcSpec(**x) for x in d.get("procedures", [])],
                rules=[PolicyRule(**x) for x in d.get("rules", [])],
                rho=float(d.get("rho", 0.05)),
                pending_prob=float(d.get("pending_prob", 0.2)),
                seed=int(d.get("seed", 1)),
            )
        except (TypeError, ValueError) as exc:
            raise SpecValidationError([str(exc)]) from None
        spec.validate()
        return spec

    def action_labels(self) -> list[str]:
        return ([f"lab_order:{lab.code}" for lab in sorted(self.labs, key=lambda x: x.code)]
                + [f"medication_given:{m.code}" for m in sorted(self.medications, key=lambda x: x.code)])

    def eligible_actions(self) -> set[str]:
        return {r.action for r in self.rules}


def _lab_dict(lab: LabSpec) -> dict:
    d = vars(lab).copy()
    d["tokens"] = list(lab.tokens) if lab.tokens else None
    return d


def demo_spec(seed: int = 1, n_patients: int = 500, rho: float = 0.05) -> CohortSpec:
    """Post-surgical cohort with 10 labs, 5 medications and 3 policy rules.

    The first rule mirrors heparin-induced thrombocytopenia: a falling
    platelet count in a patient on heparin triggers a confirmatory assay.
    """
    labs = [
        LabSpec("PLT", 210, 35, 8, 6, 0.92, drift={"hit": -38.0}),
        LabSpec("WBC", 8.0, 1.5, 0.5, 0.4, 0.9, drift={"infection": 1.6},
                treatment={"ANTIBIOTIC": -0.9}),
        LabSpec("HGB", 11.0, 1.1, 0.25, 0.2, 0.9, drift={"bleeding": -0.9},
                treatment={"TRANSFUSION": 1.4}),
        LabSpec("HPF4", measure_prob=0.0, tokens=("NEG", "POS"), positive_if="hit"),
        LabSpec("NA", 139, 3, 1.0, 0.8, 0.7),
        LabSpec("K", 4.2, 0.4, 0.15, 0.1, 0.7),
        LabSpec("CREAT", 1.0, 0.3, 0.08, 0.05, 0.6),
        LabSpec("GLU", 130, 25, 10, 8, 0.6),
        LabSpec("BUN", 18, 6, 2.0, 1.0, 0.5),
        LabSpec("INR", 1.2, 0.2, 0.05, 0.04, 0.4),
    ]
    meds = [
        MedSpec("HEPARIN", 0.03, "anticoagulated", 0.97),
        MedSpec("ANTIBIOTIC", 0.05),
        MedSpec("TRANSFUSION", 0.03),
        MedSpec("INSULIN", 0.05, "diabetic", 0.97),
        MedSpec("FUROSEMIDE", 0.3),
    ]
    rules = [
        PolicyRule("hit_workup", "lab_order:HPF4",
                   [{"lab": "PLT", "op": "<", "value": 110.0},
                    {"on_medication": "HEPARIN", "min_days": 1}], 0.98, 0.003),
        PolicyRule("infection_treatment", "medication_given:ANTIBIOTIC",
                   [{"lab": "WBC", "op": ">", "value": 11.5}], 0.98, 0.005),
        PolicyRule("anemia_transfusion", "medication_given:TRANSFUSION",
                   [{"lab": "HGB", "op": "<", "value": 8.8}], 0.98, 0.005),
    ]
    return CohortSpec(
        n_patients=n_patients,
        conditions={"anticoagulated": (0.6, 0, None), "hit": (0.35, 1, "anticoagulated"),
                    "infection": (0.4, 2, None), "bleeding": (0.35, 2, None),
                    "diabetic": (0.3, 0, None)},
        labs=labs, medications=meds,
        procedures=[ProcSpec("VALVE", 0.4), ProcSpec("CABG", 0.6)],
        rules=rules, rho=rho, seed=seed)


@dataclass
class GroundTruth:
    """Intended vs executed value of every (patient, segment, action) slot."""

    rows: list = field(default_factory=list)  # (patient_id, segment_time, action, intended, executed, eligible)

    def injected(self) -> list[bool]:
        return [r[3] != r[4] for r in self.rows]

    def injected_fraction(self) -> float:
        el = [r for r in self.rows if r[5]]
        return sum(r[3] != r[4] for r in el) / len(el) if el else 0.0

    def lookup(self) -> dict:
        return {(r[0], r[1], r[2]): r for r in self.rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["patient_id", "segment_time", "action", "intended", "executed",
                    "eligible", "injected"])
        for pid, t, a, i, e, el in self.rows:
            w.writerow([pid, format_time(t), a, int(i), int(e), int(el), int(i != e)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "GroundTruth":
        rows = []
        for r in csv.DictReader(io.StringIO(text)):
            rows.append((r["patient_id"], datetime.fromisoformat(r["segment_time"]), r["action"],
                         bool(int(r["intended"])), bool(int(r["executed"])),
                         bool(int(r["eligible"]))))
        return cls(rows)


# --- generation --------------------------------------------------------------

class _Patient:
    def __init__(self, spec: CohortSpec, index: int):
        self.spec = spec
        self.rng = np.random.default_rng([spec.seed, index])
        self.pid = f"P{index:05d}"
        self.events: list[RawEvent] = []
        self.last_value: dict[str, float] = {}
        self.admins: dict[str, list[datetime]] = {m.code: [] for m in spec.medications}

    def minute(self, base: datetime, lo_h: float, hi_h: float) -> datetime:
        return base + timedelta(minutes=int(self.rng.integers(int(lo_h * 60), int(hi_h * 60))))

    def on_days(self, code: str, t: datetime) -> float:
        """Days since the first dose if a dose fell in the trailing period, else -1."""
        given = [a for a in self.admins[code] if a <= t]
        if not given or (t - given[-1]) >= timedelta(hours=PERIOD_H):
            return -1.0
        return (t - given[0]).total_seconds() / 86400.0

    def predicate(self, rule: PolicyRule, t: datetime) -> bool:
        for c in rule.clauses:
            if "lab" in c:
                v = self.last_value.get(c["lab"])
                if v is None or not (v < c["value"] if c["op"] == "<" else v > c["value"]):
                    return False
            elif self.on_days(c["on_medication"], t) < c.get("min_days", 0):
                return False
        return True


def _generate_patient(spec: CohortSpec, index: int, day0: datetime, n_days_range: int):
    p = _Patient(spec, index)
    rng = p.rng
    first_anchor = datetime.combine(day0.date(), ANCHOR) + timedelta(
        days=int(rng.integers(0, n_days_range + 1)))
    admission = p.minute(first_anchor - timedelta(hours=22), 0, 21)
    n_seg = int(rng.integers(spec.stay_days[0], spec.stay_days[1] + 1))
    last_anchor = first_anchor + timedelta(days=n_seg - 1)
    discharge = p.minute(last_anchor, 6, 20)
    demo = Demographics(str(rng.choice(["F", "M"])), float(rng.integers(35, 90)),
                        str(rng.choice(["white", "black", "asian", "other"], p=[.7, .15, .1, .05])))
    devices = tuple(bool(x) for x in rng.random(4) < 0.1)

    cond: dict[str, float] = {}
    for name, (prev, onset_max, requires) in spec.conditions.items():
        draw = rng.random()
        onset = float(rng.integers(0, int(onset_max) + 1))
        if draw < prev and (requires is None or requires in cond):
            cond[name] = onset

    for proc in spec.procedures:
        if rng.random() < proc.prob:
            p.events.append(RawEvent(p.pid, p.minute(admission, 0, 1), "procedure", proc.code))

    latent = {lab.code: rng.normal(lab.mean, lab.sd) for lab in spec.labs if not lab.tokens}
    labs = {lab.code: lab for lab in spec.labs}
    meds = {m.code: m for m in spec.medications}
    rules = {r.action: r for r in spec.rules}
    actions = spec.action_labels()
    eligible = spec.eligible_actions()
    truth = []

    def lab_value(lab: LabSpec):
        if lab.tokens:
            return lab.tokens[1] if lab.positive_if in cond else lab.tokens[0]
        return round(float(latent[lab.code] + rng.normal(0, lab.noise_sd)), 1)

    def place_lab(lab: LabSpec, lo: datetime, hi_h: float):
        # a pending order must be resulted before the window closes
        can_pend = hi_h >= 4.0
        t_order = p.minute(lo, 0.25, hi_h - 3.5 if can_pend else hi_h - 0.1)
        if can_pend and rng.random() < spec.pending_prob:
            p.events.append(RawEvent(p.pid, t_order, "lab", lab.code, None, "pending"))
            t_res = t_order + timedelta(minutes=int(rng.integers(60, 180)))
        else:
            t_res = t_order
        v = lab_value(lab)
        p.events.append(RawEvent(p.pid, t_res, "lab", lab.code, v, "resulted"))
        if not lab.tokens:
            p.last_value[lab.code] = v

    def give_med(code: str, lo: datetime, hi_h: float):
        # doses early in the window keep daily courses contiguous
        t_admin = p.minute(lo, 0.25, min(hi_h, 6.0))
        p.events.append(RawEvent(p.pid, t_admin, "medication", code))
        p.admins[code].append(t_admin)

    # admission panel and standing regimes before the first anchor
    pre_h = (first_anchor - admission).total_seconds() / 3600.0
    for lab in spec.labs:
        if not lab.tokens and rng.random() < max(lab.measure_prob, 0.8):
            place_lab(lab, admission, pre_h)
    for med in spec.medications:
        if med.regime in cond and rng.random() < med.regime_prob:
            give_med(med.code, admission, pre_h)

    for k in range(n_seg):
        t = first_anchor + timedelta(days=k)
        hi_h = min(PERIOD_H, (discharge - t).total_seconds() / 3600.0)
        # latent evolution over this day (observed through labs drawn in the window)
        for code, lab in labs.items():
            if lab.tokens:
                continue
            step = rng.normal(0, lab.walk_sd)
            for cname, rate in lab.drift.items():
                if cname in cond and k >= cond[cname]:
                    step += rate
            latent[code] += step
        # rules see only what was observable at t, before this window's actions
        fires = {label: p.predicate(r, t) for label, r in rules.items()}
        for label in actions:
            kind, code = label.split(":", 1)
            if label in rules:
                prob = rules[label].p if fires[label] else rules[label].p_else
            elif kind == "lab_order":
                prob = labs[code].measure_prob
            else:
                m = meds[code]
                prob = m.regime_prob if m.regime in cond else m.base_prob
            intended = bool(rng.random() < prob)
            flip = label in eligible and bool(rng.random() < spec.rho)
            executed = intended != flip
            truth.append((p.pid, t, label, intended, executed, label in eligible))
            if executed:
                if kind == "lab_order":
                    place_lab(labs[code], t, hi_h)
                else:
                    give_med(code, t, hi_h - 0.25)
                    for lab in spec.labs:
                        if code in lab.treatment:
                            latent[lab.code] += lab.treatment[code]
    p.events.sort(key=lambda e: e.timestamp)
    rec = PatientRecord(p.pid, admission, discharge, demo, tuple(p.events), devices)
    return rec, truth


def generate_cohort(spec: CohortSpec) -> tuple[CohortDataset, GroundTruth]:
    """Deterministic cohort and ground truth for ``spec`` (seeded per patient)."""
    spec.validate()
    day0 = datetime.fromisoformat(spec.start)
    span = max((datetime.fromisoformat(spec.end) - day0).days, 0)
    records, truth = [], []
    for i in range(spec.n_patients):
        rec, rows = _generate_patient(spec, i, day0, span)
        records.append(rec)
        truth.extend(rows)
    return CohortDataset.from_records(records), GroundTruth(truth)


def inject_anomalies(ds: CohortDataset, truth: GroundTruth, rho: float, seed: int,
                     eligible: set[str] | None = None) -> tuple[CohortDataset, GroundTruth]:
    """Flip eligible executed actions independently with probability ``rho``.

    Omission flips delete the action's events from its window; commission
    flips add one event at a seeded time inside the window.  The flip draws
    depend only on ``seed`` and the slot, so applying the same call twice
    restores the original executed values.
    """
    if not 0.0 <= rho <= 0.5:
        raise SpecValidationError(["rho must lie in [0, 0.5]"])
    period = timedelta(hours=PERIOD_H)
    by_pid = {r.patient_id: r for r in ds.records}
    edits: dict[str, list] = {}
    rows = []
    for row in truth.rows:
        pid, t, label, intended, executed, el = row
        ok = el if eligible is None else label in eligible
        slot_rng = np.random.default_rng([seed, *map(ord, f"{pid}|{format_time(t)}|{label}")])
        if ok and slot_rng.random() < rho:
            edits.setdefault(pid, []).append((t, label, not executed, slot_rng))
            executed = not executed
        rows.append((pid, t, label, intended, executed, el))
    records = []
    for rec in ds.records:
        events = list(rec.events)
        for t, label, add, slot_rng in edits.get(rec.patient_id, []):
            kind, code = label.split(":", 1)
            ch = "lab" if kind == "lab_order" else "medication"
            in_window = [e for e in events if e.channel_kind == ch and e.code == code
                         and t <= e.timestamp < t + period]
            if add and not in_window:
                end = min(t + period, rec.discharge_time)
                span = max(int((end - t).total_seconds() // 60) - 1, 1)
                ts = t + timedelta(minutes=int(slot_rng.integers(0, span)))
                value = _typical_value(rec, code) if ch == "lab" else None
                events.append(RawEvent(rec.patient_id, ts, ch, code, value,
                                       "resulted" if ch == "lab" else None))
            elif not add:
                events = [e for e in events if e not in in_window]
        events.sort(key=lambda e: e.timestamp)
        records.append(replace(rec, events=tuple(events)))
    return CohortDataset.from_records(records), GroundTruth(rows)


def _typical_value(rec: PatientRecord, code: str):
    prior = [e.value for e in rec.events if e.code == code and e.value is not None]
    return prior[-1] if prior else 0.0


def write_cohort(ds: CohortDataset, truth: GroundTruth, cohort_path, truth_path) -> None:
    from .records import serialize
    with open(cohort_path, "w") as fh:
        fh.write(serialize(ds))
    with open(truth_path, "w") as fh:
        fh.write(truth.to_csv())


def load_spec(path) -> CohortSpec:
    path = str(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        d = tomllib.loads(raw.decode())
    else:
        d = json.loads(raw)
    if d.get("demo"):
        base = demo_spec().to_dict()
        base.update({k: v for k, v in d.items() if k != "demo"})
        d = base
    return CohortSpec.from_dict(d)
