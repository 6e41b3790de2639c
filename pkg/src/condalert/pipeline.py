"""Stage wiring: train per-action models, scan for alerts, label and evaluate."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, time, timedelta

import numpy as np

from .alerts import AlertPipelineConfig, ModelRegistry, filter_candidates, scan_test_set
from .features import CONTEXT_GROUP, Featurizer, InstanceSet, Scaler, fit_scaler
from .learner import (CalibratedModel, DegenerateLabelsError, TrainConfig,
                      cross_validated_decisions, fit_platt, train_linear_svm)
from .records import CohortDataset, filter_rare_channels, rare_channels, split_by_date
from .selection import SelectionResult, greedy_select, score_groups

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SelectionConfig:
    strategy: str = "ranked-pass"
    eps: float = 0.001
    max_candidates: int = 30


@dataclass(frozen=True)
class EvaluationConfig:
    bin_width: float = 0.2
    fit_mode: str = "bins"

    def __post_init__(self):
        if not 0.0 < self.bin_width <= 1.0:
            raise ValueError("bin_width must lie in (0, 1]")
        if self.fit_mode not in ("bins", "raw"):
            raise ValueError("fit_mode must be 'bins' or 'raw'")


@dataclass(frozen=True)
class PipelineConfig:
    cutoff: str = "2005-01-01"
    min_patients: int = 20
    anchor: str = "08:00"
    period_hours: float = 24.0
    train: TrainConfig = TrainConfig()
    selection: SelectionConfig = SelectionConfig()
    alert: AlertPipelineConfig = AlertPipelineConfig()
    evaluation: EvaluationConfig = EvaluationConfig()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        train = dict(d.pop("train", {}))
        if "c_grid" in train:
            train["c_grid"] = tuple(train["c_grid"])
        return cls(train=TrainConfig(**train),
                   selection=SelectionConfig(**d.pop("selection", {})),
                   alert=AlertPipelineConfig(**d.pop("alert", {})),
                   evaluation=EvaluationConfig(**d.pop("evaluation", {})), **d)

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(self, train=replace(self.train, seed=seed))


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    with open(path, "rb") as fh:
        raw = fh.read()
    if str(path).endswith(".json"):
        d = json.loads(raw)
    else:
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        d = tomllib.loads(raw.decode())
    return PipelineConfig.from_dict(d)


@dataclass
class TrainingArtifacts:
    featurizer: Featurizer
    scaler: Scaler
    dropped_channels: list
    models: list[CalibratedModel]
    selections: dict[str, SelectionResult] = field(default_factory=dict)
    skipped: dict[str, str] = field(default_factory=dict)
    train_fingerprint: str = ""


def train_action_model(X, y, inst: InstanceSet, action: str, cfg: PipelineConfig):
    """Group selection, C choice by CV AUC, Platt fit on out-of-fold values."""
    groups = inst.catalog.group_columns()
    tc = cfg.train
    ranked = score_groups(X, y, groups, tc)
    sel = greedy_select(X, y, ranked, groups, tc, cfg.selection.strategy,
                        cfg.selection.eps, cfg.selection.max_candidates,
                        always_eligible=(CONTEXT_GROUP,))
    cols = np.sort(np.concatenate([groups[g] for g in sel.groups]))
    best = None
    for C in tc.c_grid:
        dec, a = cross_validated_decisions(X[:, cols], y, tc, C)
        if best is None or a > best[1] + 1e-12:
            best = (C, a, dec)
    C, cv_auc, dec = best
    platt = fit_platt(dec, y)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        linear = train_linear_svm(X[:, cols], y, tc, C)
    model = CalibratedModel(action, cols, linear, platt, list(sel.groups), float(cv_auc),
                            len(inst.catalog), inst.catalog.fingerprint(), float(C),
                            {"n_train": int(len(y)), "n_positive": int(np.sum(y > 0)),
                             "selection_auc": sel.final_cv_auc,
                             "config_hash": cfg.config_hash()})
    return model, sel


def cohort_fingerprint(ds: CohortDataset) -> str:
    h = hashlib.sha256()
    for rec in ds.records:
        h.update(f"{rec.patient_id}|{rec.admission_time}|{len(rec.events)}\n".encode())
        for e in rec.events:
            h.update(f"{e.timestamp}|{e.channel_kind}|{e.code}|{e.value}|{e.order_status}\n".encode())
    return h.hexdigest()[:16]


def prepare_training(ds: CohortDataset, cfg: PipelineConfig):
    """Split, filter rare channels on train, featurize and standardize."""
    train, test = split_by_date(ds, datetime.fromisoformat(cfg.cutoff))
    drop = rare_channels(train, cfg.min_patients)
    train = filter_rare_channels(train, cfg.min_patients, drop)
    test = filter_rare_channels(test, cfg.min_patients, drop)
    return train, test, sorted(drop)


def train_models(train: CohortDataset, cfg: PipelineConfig, dropped=()) -> TrainingArtifacts:
    fz = Featurizer.from_cohort(train, time.fromisoformat(cfg.anchor), cfg.period_hours)
    raw = fz.featurize(train)
    scaler = fit_scaler(raw.X, raw.catalog)
    X = scaler.transform(raw.X)
    art = TrainingArtifacts(fz, scaler, list(dropped), [],
                            train_fingerprint=cohort_fingerprint(train))
    for j, action in enumerate(fz.actions):
        y = np.where(raw.Y[:, j], 1.0, -1.0)
        n_min = int(min(np.sum(y > 0), np.sum(y < 0)))
        if n_min < 2:
            art.skipped[action.label] = f"minority class has {n_min} examples"
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            try:
                model, sel = train_action_model(X, y, raw, action.label, cfg)
            except DegenerateLabelsError as exc:
                art.skipped[action.label] = str(exc)
                continue
        model.metadata["train_fingerprint"] = art.train_fingerprint
        art.models.append(model)
        art.selections[action.label] = sel
        log.info("%s: cv_auc=%.3f groups=%s", action.label, model.cv_auc, sel.groups)
    return art


def model_filename(action: str) -> str:
    return "model_" + action.replace(":", "__") + ".json"


def save_artifacts(art: TrainingArtifacts, model_dir, cfg: PipelineConfig) -> None:
    os.makedirs(model_dir, exist_ok=True)
    for name in os.listdir(model_dir):
        if name.startswith(("model_", "audit_")):
            os.remove(os.path.join(model_dir, name))
    doc = {"featurizer": art.featurizer.to_dict(), "scaler": art.scaler.to_dict(),
           "catalog_fingerprint": art.featurizer.catalog.fingerprint(),
           "dropped_channels": [list(k) for k in art.dropped_channels],
           "config": cfg.to_dict(), "train_fingerprint": art.train_fingerprint}
    with open(os.path.join(model_dir, "featurizer.json"), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    for m in art.models:
        with open(os.path.join(model_dir, model_filename(m.action)), "w") as fh:
            fh.write(m.to_json())
        art.selections[m.action].write_audit(
            os.path.join(model_dir, "audit_" + m.action.replace(":", "__") + ".csv"))
    with open(os.path.join(model_dir, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["action", "cv_auc", "C", "selected_groups", "gate_pass"])
        for m in art.models:
            w.writerow([m.action, f"{m.cv_auc:.6f}", m.C, ";".join(m.selected_groups),
                        int(m.cv_auc >= cfg.alert.model_auc_gate)])
        for action, why in sorted(art.skipped.items()):
            w.writerow([action, "", "", f"skipped: {why}", 0])


def load_featurizer(model_dir):
    with open(os.path.join(model_dir, "featurizer.json")) as fh:
        doc = json.load(fh)
    fz = Featurizer.from_dict(doc["featurizer"])
    scaler = Scaler(np.array(doc["scaler"]["mean"]), np.array(doc["scaler"]["scale"]),
                    fz.catalog)
    return fz, scaler, {tuple(k) for k in doc["dropped_channels"]}


def featurize_for_scoring(ds: CohortDataset, fz: Featurizer, scaler: Scaler,
                          dropped=frozenset()) -> InstanceSet:
    ds = filter_rare_channels(ds, 1, set(dropped)) if dropped else ds
    raw = fz.featurize(ds)
    return InstanceSet(scaler.transform(raw.X), raw.Y, raw.patient_ids, raw.times,
                       raw.prev_index, raw.catalog, raw.actions)


def run_alerts(ds_test: CohortDataset, models, fz: Featurizer, scaler: Scaler,
               cfg: AlertPipelineConfig, dropped=frozenset(), filtered: bool = True):
    registry = ModelRegistry(models, cfg.model_auc_gate)
    inst = featurize_for_scoring(ds_test, fz, scaler, dropped)
    cands = scan_test_set(registry, inst, cfg)
    return (filter_candidates(cands, cfg) if filtered else cands), registry


def truth_labels(alert_rows, truth, period_hours: float = 24.0) -> list[bool]:
    """Usefulness of each alert = whether its action slot was injected.

    An alert at time ``t`` concerns the action taken in ``[t - period, t)``.
    """
    lookup = truth.lookup()
    out = []
    for r in alert_rows:
        t = r["time"] if isinstance(r["time"], datetime) else datetime.fromisoformat(r["time"])
        row = lookup.get((r["patient_id"], t - timedelta(hours=period_hours), r["action"]))
        if row is None:
            raise KeyError(f"no ground truth for alert {r['alert_id']}")
        out.append(row[3] != row[4])
    return out
