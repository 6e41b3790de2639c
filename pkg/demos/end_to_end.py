"""Generate a small HIT-like cohort, train per-action models, raise alerts
and score them against the generator's injected anomalies.

    python demos/end_to_end.py [n_patients] [seed]
"""

import sys
from collections import Counter

from condalert.alerts import AlertPipelineConfig
from condalert.evaluation import alert_roc, binned_true_alert_rate, linear_fit
from condalert.pipeline import PipelineConfig, prepare_training, run_alerts, train_models, truth_labels
from condalert.synth import demo_spec, generate_cohort

n_patients = int(sys.argv[1]) if len(sys.argv) > 1 else 200
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 1

ds, truth = generate_cohort(demo_spec(seed=seed, n_patients=n_patients))
print(f"{len(ds)} patients, {len(truth.rows)} action slots, "
      f"{truth.injected_fraction():.1%} of eligible slots flipped")

cfg = PipelineConfig()
train, test, dropped = prepare_training(ds, cfg)
art = train_models(train, cfg, dropped)
print(f"trained on {len(train)} patients admitted before {cfg.cutoff}; testing on {len(test)}")
for m in sorted(art.models, key=lambda m: -m.cv_auc)[:5]:
    print(f"  {m.action:32s} cv_auc={m.cv_auc:.3f}  groups={', '.join(m.selected_groups)}")

# Score every candidate (no probability gate, no caps) so the rate-by-score
# relationship is visible across the whole range.
scan = AlertPipelineConfig(probability_gate=1.0, anomaly_cap=None, alert_cap=None)
alerts, registry = run_alerts(test, art.models, art.featurizer, art.scaler, scan, dropped)
useful = truth_labels([c.to_row() for c in alerts], truth)
print(f"{len(alerts)} alerts from {len(registry)} models; {sum(useful)} hit an injected anomaly")
print("alert types:", dict(Counter(c.alert_type for c in alerts)))

scores = [c.alert_score for c in alerts]
roc = alert_roc(scores, useful)
print(f"alert-score AUC {roc.auc:.3f} (p={roc.p_value:.2g})")
bins = binned_true_alert_rate(scores, useful)
for b in bins:
    rate = "  -  " if b.n == 0 else f"{b.true_alert_rate:.3f}"
    print(f"  [{b.lower:.1f}, {b.upper:.1f})  n={b.n:5d}  true alert rate {rate}")
fit = linear_fit(bins)
print(f"weighted fit: slope {fit.slope:.3f}, p {fit.p_value:.3g}")
