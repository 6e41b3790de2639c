"""Anomaly scores, two-step alert scores and alert candidate selection."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass
from datetime import datetime

import numpy as np

from .features import ActionDescriptor, InstanceSet
from .learner import CalibratedModel, predict_probability

log = logging.getLogger(__name__)

ALERT_TYPES = ("lab_omission", "med_omission", "med_commission")
ALERT_COLUMNS = ("alert_id", "patient_id", "time", "action", "alert_type", "observed",
                 "anom_prev", "anom_curr", "alert_score")


@dataclass(frozen=True)
class AlertPipelineConfig:
    model_auc_gate: float = 0.68
    probability_gate: float = 0.15
    gate_mode: str = "both"
    anomaly_cap: int | None = 125
    alert_cap: int | None = 20
    alert_threshold: float = 0.0
    severity_threshold: float | None = None

    def __post_init__(self):
        for name in ("model_auc_gate", "probability_gate", "alert_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.gate_mode not in ("both", "either"):
            raise ValueError("gate_mode must be 'both' or 'either'")
        for name in ("anomaly_cap", "alert_cap"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AnomalyAssessment:
    patient_id: str
    time: datetime
    action: str
    observed: bool
    anomaly: float


@dataclass(frozen=True)
class AlertCandidate:
    patient_id: str
    time: datetime
    action: str
    observed: bool
    anom_prev: float
    anom_curr: float
    alert_score: float
    alert_type: str

    @property
    def alert_id(self) -> str:
        return f"{self.patient_id}|{self.time.strftime('%Y-%m-%dT%H:%M')}|{self.action}"

    @property
    def max_anomaly(self) -> float:
        return max(self.anom_prev, self.anom_curr)

    def to_row(self) -> dict:
        return {"alert_id": self.alert_id, "patient_id": self.patient_id,
                "time": self.time.strftime("%Y-%m-%dT%H:%M"), "action": self.action,
                "alert_type": self.alert_type, "observed": int(self.observed),
                "anom_prev": repr(self.anom_prev), "anom_curr": repr(self.anom_curr),
                "alert_score": repr(self.alert_score)}


def alert_type(action_kind: str, observed: bool) -> str | None:
    """Alert family of an (action kind, observed value) pair; None for lab commissions."""
    if action_kind == "lab_order":
        return None if observed else "lab_omission"
    if action_kind == "medication_given":
        return "med_commission" if observed else "med_omission"
    raise ValueError(f"unknown action kind {action_kind!r}")


class ModelRegistry:
    """Calibrated models keyed by action label, admitted only above the AUC gate."""

    def __init__(self, models=(), auc_gate: float = 0.68):
        self.auc_gate = auc_gate
        self.models: dict[str, CalibratedModel] = {}
        self.rejected: dict[str, float] = {}
        for m in models:
            self.admit(m)

    def admit(self, model: CalibratedModel) -> bool:
        if model.cv_auc >= self.auc_gate:
            self.models[model.action] = model
            return True
        self.rejected[model.action] = model.cv_auc
        return False

    def __len__(self):
        return len(self.models)

    def __contains__(self, action):
        return action in self.models

    def __getitem__(self, action) -> CalibratedModel:
        return self.models[action]

    def actions(self) -> list[str]:
        return sorted(self.models)

    @classmethod
    def load(cls, model_dir, auc_gate: float = 0.68) -> "ModelRegistry":
        models = []
        if os.path.isdir(model_dir):
            for name in sorted(os.listdir(model_dir)):
                if name.startswith("model_") and name.endswith(".json"):
                    with open(os.path.join(model_dir, name)) as fh:
                        models.append(CalibratedModel.from_json(fh.read()))
        return cls(models, auc_gate)


def _check_catalog(cm: CalibratedModel, inst: InstanceSet) -> None:
    if cm.n_features != len(inst.catalog) or (
            cm.catalog_fingerprint and cm.catalog_fingerprint != inst.catalog.fingerprint()):
        raise ValueError(f"model {cm.action} was trained on a different feature catalog")


def anomaly_score(cm: CalibratedModel, x, observed):
    """1 - P(observed | x): high when the observed action is improbable."""
    p1 = predict_probability(cm, x)
    return np.where(observed, 1.0 - p1, p1) if np.ndim(p1) else (1.0 - p1 if observed else p1)


def alert_score(cm: CalibratedModel, x_prev, x_curr, observed_prev: bool) -> float | None:
    """Minimum of the anomaly of ``observed_prev`` before and after its window."""
    if x_prev is None:
        return None
    return min(anomaly_score(cm, x_prev, observed_prev),
               anomaly_score(cm, x_curr, observed_prev))


def scan_test_set(registry: ModelRegistry, inst: InstanceSet,
                  cfg: AlertPipelineConfig = AlertPipelineConfig()) -> list[AlertCandidate]:
    """Score every (instance with a predecessor, registered action) pair.

    A pair becomes a candidate when the probability of the observed action
    is at most ``cfg.probability_gate`` at both steps (``gate_mode="both"``)
    or at either step (``"either"``).  Lab-order commissions are skipped.
    """
    if not len(registry) or not len(inst):
        return []
    has_prev = np.flatnonzero(inst.prev_index >= 0)
    prev = inst.prev_index[has_prev]
    labels = [a.label for a in inst.actions]
    out = []
    for action in registry.actions():
        cm = registry[action]
        _check_catalog(cm, inst)
        if action not in labels:
            log.warning("registered action %s absent from instance set", action)
            continue
        j = labels.index(action)
        kind = ActionDescriptor.from_label(action).action_kind
        p1 = predict_probability(cm, inst.X)
        observed = inst.Y[prev, j].astype(bool)
        p_obs_prev = np.where(observed, p1[prev], 1.0 - p1[prev])
        p_obs_curr = np.where(observed, p1[has_prev], 1.0 - p1[has_prev])
        if cfg.gate_mode == "both":
            keep = (p_obs_prev <= cfg.probability_gate) & (p_obs_curr <= cfg.probability_gate)
        else:
            keep = (p_obs_prev <= cfg.probability_gate) | (p_obs_curr <= cfg.probability_gate)
        for k in np.flatnonzero(keep):
            kind_type = alert_type(kind, bool(observed[k]))
            if kind_type is None:
                continue
            i = has_prev[k]
            a_prev, a_curr = 1.0 - float(p_obs_prev[k]), 1.0 - float(p_obs_curr[k])
            out.append(AlertCandidate(inst.patient_ids[i], inst.times[i], action,
                                      bool(observed[k]), a_prev, a_curr,
                                      min(a_prev, a_curr), kind_type))
    out.sort(key=lambda c: (c.patient_id, c.time, c.action))
    return out


def _strongest(cands: list[AlertCandidate], key, cap: int | None) -> list[AlertCandidate]:
    ranked = sorted(cands, key=lambda c: (-key(c), c.time, c.patient_id))
    return ranked if cap is None else ranked[:cap]


def filter_candidates(cands: list[AlertCandidate],
                      cfg: AlertPipelineConfig = AlertPipelineConfig()) -> list[AlertCandidate]:
    """Per action keep the strongest anomalies, then the strongest alerts among them.

    Ties prefer the earlier time, then the lower patient id.  Candidates with
    an alert score below ``cfg.alert_threshold`` are dropped last.
    """
    by_action: dict[str, list[AlertCandidate]] = {}
    for c in cands:
        by_action.setdefault(c.action, []).append(c)
    out = []
    for action in sorted(by_action):
        pool = _strongest(by_action[action], lambda c: c.max_anomaly, cfg.anomaly_cap)
        pool = _strongest(pool, lambda c: c.alert_score, cfg.alert_cap)
        out.extend(c for c in pool if c.alert_score >= cfg.alert_threshold)
    out.sort(key=lambda c: (c.patient_id, c.time, c.action))
    return out


def sample_study_alerts(cands: list[AlertCandidate], n: int, seed: int = 0) -> list[AlertCandidate]:
    """Seeded sample of ``n`` alerts, stratified proportionally by alert type.

    A mechanical stand-in for hand-picking a review set; not part of the
    scoring method itself.
    """
    if n >= len(cands):
        return list(cands)
    rng = np.random.default_rng(seed)
    strata = {t: [c for c in cands if c.alert_type == t] for t in ALERT_TYPES}
    sizes = {t: int(np.floor(n * len(s) / len(cands))) for t, s in strata.items()}
    # distribute the rounding remainder to the largest strata
    for t in sorted(strata, key=lambda t: -len(strata[t]))[: n - sum(sizes.values())]:
        sizes[t] += 1
    picked = []
    for t, s in strata.items():
        if sizes[t]:
            idx = rng.choice(len(s), size=min(sizes[t], len(s)), replace=False)
            picked.extend(s[i] for i in sorted(idx))
    picked.sort(key=lambda c: (c.patient_id, c.time, c.action))
    return picked


def write_alerts(cands: list[AlertCandidate], path) -> None:
    path = str(path)
    rows = [c.to_row() for c in cands]
    with open(path, "w", newline="") as fh:
        if path.endswith(".jsonl"):
            for r in rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        else:
            w = csv.DictWriter(fh, ALERT_COLUMNS, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)


def read_alerts(path) -> list[dict]:
    path = str(path)
    with open(path, newline="") as fh:
        if path.endswith(".jsonl"):
            rows = [json.loads(line) for line in fh if line.strip()]
        else:
            rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("anom_prev", "anom_curr", "alert_score"):
            r[k] = float(r[k])
        r["observed"] = bool(int(r["observed"]))
    return rows
