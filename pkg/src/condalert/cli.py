"""Command-line driver: generate -> ingest -> train -> alert -> evaluate -> report.

Every stage reads and writes plain files and leaves a ``manifest_<command>.json``
next to its outputs.  Exit codes: 0 success, 2 bad input, 3 nothing trainable,
4 an alert reached the configured severity threshold.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone

from . import __version__
from .alerts import (ModelRegistry, filter_candidates, read_alerts, sample_study_alerts,
                     write_alerts)
from .evaluation import (ReviewLabel, alert_roc, binned_true_alert_rate, linear_fit,
                         linear_fit_raw, majority_gold_standard, pairwise_kappa,
                         score_histogram)
from .pipeline import (PipelineConfig, load_config, load_featurizer, prepare_training,
                       run_alerts, save_artifacts, train_models, truth_labels)
from .records import CohortParseError, build_catalog, load_cohort, serialize, split_by_date
from .report import write_evaluation_report, write_table
from .synth import GroundTruth, SpecValidationError, demo_spec, generate_cohort, load_spec

log = logging.getLogger("condalert")

EXIT_OK, EXIT_INPUT, EXIT_UNTRAINABLE, EXIT_SEVERITY = 0, 2, 3, 4


class InputError(Exception):
    """Raised for anything the user can fix by changing files or flags."""


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int | None
    tool_version: str = __version__
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    started: str = ""
    finished: str = ""

    def write(self, out_dir) -> str:
        path = os.path.join(out_dir, f"manifest_{self.command}.json")
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)
            fh.write("\n")
        return path


def _now() -> str:
    # SOURCE_DATE_EPOCH pins timestamps for reproducible builds
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _digests(paths) -> dict:
    out = {}
    for p in paths:
        if os.path.isdir(p):
            for name in sorted(os.listdir(p)):
                q = os.path.join(p, name)
                if os.path.isfile(q) and not name.startswith("manifest_"):
                    out[q] = file_digest(q)
        elif os.path.isfile(p):
            out[p] = file_digest(p)
    return out


def _require_file(path, what: str) -> str:
    if path is None:
        raise InputError(f"{what} is required")
    if not os.path.isfile(path):
        raise InputError(f"{what} not found: {path}")
    return path


def _config(args) -> PipelineConfig:
    if args.config is not None:
        _require_file(args.config, "config file")
    try:
        cfg = load_config(args.config)
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad config {args.config}: {exc}") from exc
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _load_cohort(path):
    _require_file(path, "cohort file")
    try:
        return load_cohort(path)
    except CohortParseError as exc:
        raise InputError(f"{path}: {exc}") from exc


# --- commands ----------------------------------------------------------------

def cmd_generate(args) -> int:
    if args.spec is None:
        spec = demo_spec()
    else:
        _require_file(args.spec, "spec file")
        try:
            spec = load_spec(args.spec)
        except (SpecValidationError, ValueError, TypeError, KeyError) as exc:
            raise InputError(f"bad spec {args.spec}: {exc}") from exc
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    try:
        spec.validate()
    except SpecValidationError as exc:
        raise InputError(str(exc)) from exc
    os.makedirs(args.out, exist_ok=True)
    m = RunManifest("generate", hashlib.sha256(json.dumps(spec.to_dict(), sort_keys=True)
                                               .encode()).hexdigest()[:16], spec.seed,
                    started=_now(), inputs=_digests([args.spec] if args.spec else []))
    ds, truth = generate_cohort(spec)
    cohort = os.path.join(args.out, "cohort.jsonl")
    truth_path = os.path.join(args.out, "truth.csv")
    with open(cohort, "w") as fh:
        fh.write(serialize(ds))
    with open(truth_path, "w") as fh:
        fh.write(truth.to_csv())
    with open(os.path.join(args.out, "spec.json"), "w") as fh:
        json.dump(spec.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    log.info("generated %d patients, injected fraction %.4f", len(ds), truth.injected_fraction())
    m.outputs = _digests([cohort, truth_path, os.path.join(args.out, "spec.json")])
    m.finished = _now()
    m.write(args.out)
    return EXIT_OK


def cmd_ingest(args) -> int:
    _require_file(args.cohort, "cohort file")
    try:
        ds = load_cohort(args.cohort, args.format)
    except CohortParseError as exc:
        raise InputError(f"{args.cohort}: {exc}") from exc
    os.makedirs(args.out, exist_ok=True)
    m = RunManifest("ingest", "", args.seed, started=_now(), inputs=_digests([args.cohort]))
    out = os.path.join(args.out, "cohort.jsonl")
    with open(out, "w") as fh:
        fh.write(serialize(ds))
    write_table(os.path.join(args.out, "catalog.csv"), ["kind", "code", "n_patients"],
                [(k, c, n) for (k, c), n in sorted(build_catalog(ds.records).items())])
    write_table(os.path.join(args.out, "rejected.csv"), ["line", "reason"],
                [(r[0], r[1]) if isinstance(r, tuple) else ("", str(r)) for r in ds.rejected])
    if ds.rejected:
        log.warning("%d rows rejected; see rejected.csv", len(ds.rejected))
    m.outputs = _digests([out, os.path.join(args.out, "catalog.csv"),
                          os.path.join(args.out, "rejected.csv")])
    m.finished = _now()
    m.write(args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.cutoff is not None:
        cfg = replace(cfg, cutoff=args.cutoff)
    try:
        cutoff = datetime.fromisoformat(cfg.cutoff)
    except ValueError as exc:
        raise InputError(f"bad cutoff {cfg.cutoff!r}") from exc
    ds = _load_cohort(args.cohort)
    os.makedirs(args.out, exist_ok=True)
    m = RunManifest("train", cfg.config_hash(), cfg.train.seed, started=_now(),
                    inputs=_digests([args.cohort] + ([args.config] if args.config else [])))
    train, _, dropped = prepare_training(ds, cfg)
    if not len(train):
        log.error("no training patients admitted before %s", cutoff)
        return EXIT_UNTRAINABLE
    art = train_models(train, cfg, dropped)
    save_artifacts(art, args.out, cfg)
    with open(os.path.join(args.out, "summary.csv")) as fh:
        sys.stdout.write(fh.read())
    m.outputs = _digests([args.out])
    m.finished = _now()
    m.write(args.out)
    if not art.models:
        log.error("no action had a trainable label distribution")
        return EXIT_UNTRAINABLE
    return EXIT_OK


def cmd_alert(args) -> int:
    ds = _load_cohort(args.cohort)
    os.makedirs(args.out, exist_ok=True)
    fz_path = os.path.join(args.models, "featurizer.json")
    if not os.path.isfile(fz_path):
        log.warning("no models in %s; writing an empty alert file", args.models)
        cfg = _config(args)
        m = RunManifest("alert", cfg.config_hash(), args.seed, started=_now())
        write_alerts([], os.path.join(args.out, "alerts.csv"))
        write_alerts([], os.path.join(args.out, "candidates.csv"))
        m.outputs = _digests([os.path.join(args.out, "alerts.csv")])
        m.finished = _now()
        m.write(args.out)
        return EXIT_OK
    with open(fz_path) as fh:
        trained_cfg = PipelineConfig.from_dict(json.load(fh)["config"])
    cfg = _config(args) if args.config else trained_cfg
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    m = RunManifest("alert", cfg.config_hash(), cfg.train.seed, started=_now(),
                    inputs=_digests([args.cohort, args.models]
                                    + ([args.config] if args.config else [])))
    if not args.all_patients:
        _, ds = split_by_date(ds, datetime.fromisoformat(trained_cfg.cutoff))
    registry = ModelRegistry.load(args.models, cfg.alert.model_auc_gate)
    fz, scaler, dropped = load_featurizer(args.models)
    cands, _ = run_alerts(ds, list(registry.models.values()), fz, scaler, cfg.alert, dropped,
                          filtered=False)
    alerts = filter_candidates(cands, cfg.alert)
    if args.sample is not None:
        alerts = sample_study_alerts(alerts, args.sample, cfg.train.seed)
    write_alerts(cands, os.path.join(args.out, "candidates.csv"))
    write_alerts(alerts, os.path.join(args.out, "alerts.csv"))
    log.info("%d candidates, %d alerts from %d models (%d below the AUC gate)",
             len(cands), len(alerts), len(registry), len(registry.rejected))
    m.outputs = _digests([os.path.join(args.out, "alerts.csv"),
                          os.path.join(args.out, "candidates.csv")])
    m.finished = _now()
    m.write(args.out)
    sev = cfg.alert.severity_threshold
    if sev is not None and any(c.alert_score >= sev for c in alerts):
        return EXIT_SEVERITY
    return EXIT_OK


def _read_labels(path, alerts: list[dict], period_hours: float):
    """Return (useful flags aligned with alerts, reviewer labels or None)."""
    with open(path, newline="") as fh:
        text = fh.read()
    header = next(csv.reader(io.StringIO(text)), [])
    ids = [a["alert_id"] for a in alerts]
    if {"alert_id", "reviewer_id", "useful"} <= set(header):
        labels = [ReviewLabel(r["alert_id"], r["reviewer_id"], r["useful"].strip() in ("1", "true", "True"))
                  for r in csv.DictReader(io.StringIO(text))]
        orphans = sorted({lab.alert_id for lab in labels} - set(ids))
        if orphans:
            raise InputError("labels reference unknown alerts: " + ", ".join(orphans))
        gold = {g.alert_id: g for g in majority_gold_standard(labels)}
        missing = [i for i in ids if i not in gold]
        if missing:
            raise InputError("alerts without labels: " + ", ".join(missing))
        return [gold[i].useful for i in ids], labels, list(gold.values())
    if {"patient_id", "segment_time", "action", "intended", "executed"} <= set(header):
        try:
            return truth_labels(alerts, GroundTruth.from_csv(text), period_hours), None, None
        except KeyError as exc:
            raise InputError(str(exc.args[0])) from exc
    raise InputError(f"{path}: unrecognised label file header {header}")


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    _require_file(args.alerts, "alerts file")
    _require_file(args.labels, "labels file")
    alerts = read_alerts(args.alerts)
    useful, labels, gold = _read_labels(args.labels, alerts, cfg.period_hours)
    os.makedirs(args.out, exist_ok=True)
    m = RunManifest("evaluate", cfg.config_hash(), args.seed, started=_now(),
                    inputs=_digests([args.alerts, args.labels]))
    scores = [a["alert_score"] for a in alerts]
    width = cfg.evaluation.bin_width
    bins = binned_true_alert_rate(scores, useful, width)
    roc = alert_roc(scores, useful) if 0 < sum(useful) < len(useful) else None
    try:
        fit = linear_fit(bins) if cfg.evaluation.fit_mode == "bins" else linear_fit_raw(scores, useful)
    except ValueError as exc:
        log.warning("no regression line: %s", exc)
        fit = None
    kappas = pairwise_kappa(labels) if labels is not None else None
    names = write_evaluation_report(args.out, roc, bins, fit, score_histogram(scores, width),
                                    kappas, gold)
    if roc is not None:
        log.info("alert-score AUC %.3f (p=%.3g) over %d alerts", roc.auc, roc.p_value, len(alerts))
    m.outputs = _digests([os.path.join(args.out, n) for n in names])
    m.finished = _now()
    m.write(args.out)
    return EXIT_OK


def _read_rows(path):
    if not os.path.isfile(path):
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args) -> int:
    if not os.path.isdir(args.evaluation):
        raise InputError(f"evaluation directory not found: {args.evaluation}")
    os.makedirs(args.out, exist_ok=True)
    m = RunManifest("report", "", args.seed, started=_now(),
                    inputs=_digests([args.evaluation] + ([args.models] if args.models else [])))
    lines = ["# Alert evaluation report", ""]
    if args.models:
        lines += ["## Models", "", "| action | cv_auc | C | groups | gate |", "|---|---|---|---|---|"]
        for r in _read_rows(os.path.join(args.models, "summary.csv")):
            lines.append(f"| {r['action']} | {r['cv_auc']} | {r['C']} | "
                         f"{r['selected_groups'].replace(';', ', ')} | "
                         f"{'pass' if r['gate_pass'] == '1' else 'fail'} |")
        lines.append("")
    roc = _read_rows(os.path.join(args.evaluation, "roc.csv"))
    if roc:
        r = roc[0]
        lines += ["## Alert score ROC", "",
                  f"AUC {float(r['auc']):.3f} (SE {float(r['se']):.3f}, p {float(r['p_value']):.3g}); "
                  f"{r['n_pos']} useful and {r['n_neg']} not useful alerts.", ""]
    lines += ["## True alert rate by score bin", "", "| bin | alerts | useful | rate |",
              "|---|---|---|---|"]
    for b in _read_rows(os.path.join(args.evaluation, "bins.csv")):
        lines.append(f"| [{float(b['lower']):.1f}, {float(b['upper']):.1f}) | {b['n']} | "
                     f"{b['n_useful']} | {b['true_alert_rate']} |")
    fit = _read_rows(os.path.join(args.evaluation, "fit.csv"))
    if fit:
        f = fit[0]
        lines += ["", f"Regression ({f['mode']}): slope {float(f['slope']):.3f}, "
                      f"intercept {float(f['intercept']):.3f}, p {float(f['p_value']):.3g}."]
    kap = _read_rows(os.path.join(args.evaluation, "kappa.csv"))
    if kap:
        ks = [float(k["kappa"]) for k in kap]
        lines += ["", "## Reviewer agreement", "",
                  f"Pairwise kappa ranges from {min(ks):.2f} to {max(ks):.2f} over {len(ks)} pairs."]
    lines += ["", "![histogram](alert_score_histogram.svg)", "",
              "![rates](true_alert_rate.svg)", ""]
    out = os.path.join(args.out, "report.md")
    with open(out, "w") as fh:
        fh.write("\n".join(lines))
    for name in ("alert_score_histogram.svg", "true_alert_rate.svg"):
        src = os.path.join(args.evaluation, name)
        if os.path.isfile(src) and os.path.abspath(args.out) != os.path.abspath(args.evaluation):
            with open(src) as a, open(os.path.join(args.out, name), "w") as b:
                b.write(a.read())
    m.outputs = _digests([out])
    m.finished = _now()
    m.write(args.out)
    return EXIT_OK


# --- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the seed")
    common.add_argument("--config", default=None, help="pipeline config (TOML or JSON)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="condalert", description=__doc__.splitlines()[0],
                                parents=[common])
    p.add_argument("--version", action="version", version=f"condalert {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="synthesize a cohort with ground truth")
    g.add_argument("--spec", default=None, help="cohort spec (TOML/JSON); default is the demo spec")
    g.set_defaults(func=cmd_generate)

    i = sub.add_parser("ingest", parents=[common], help="validate and normalize an event file")
    i.add_argument("cohort")
    i.add_argument("--format", choices=("jsonl", "csv"), default=None)
    i.set_defaults(func=cmd_ingest)

    t = sub.add_parser("train", parents=[common], help="train per-action models")
    t.add_argument("cohort")
    t.add_argument("--cutoff", default=None, help="admission date splitting train from test")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("alert", parents=[common], help="score the test split and raise alerts")
    a.add_argument("cohort")
    a.add_argument("--models", required=True)
    a.add_argument("--all-patients", action="store_true", help="score every patient, not only the test split")
    a.add_argument("--sample", type=int, default=None, help="seeded stratified review sample size")
    a.set_defaults(func=cmd_alert)

    e = sub.add_parser("evaluate", parents=[common], help="score alerts against labels")
    e.add_argument("alerts")
    e.add_argument("--labels", required=True, help="reviewer labels or a ground-truth CSV")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", parents=[common], help="summarize models and evaluation")
    r.add_argument("evaluation", help="directory written by the evaluate command")
    r.add_argument("--models", default=None)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
