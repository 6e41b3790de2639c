"""Simulated review panel: majority vote, pairwise kappa, and whether the
alert score separates useful from useless alerts."""

import numpy as np

from condalert.evaluation import (ReviewLabel, alert_roc, auc_significance, majority_gold_standard,
                                  pairwise_kappa)

rng = np.random.default_rng(0)
n_alerts = 222
scores = rng.uniform(0.0, 1.0, n_alerts)
truly_useful = rng.random(n_alerts) < 0.25 + 0.6 * scores

labels = []
for reviewer, accuracy in (("r1", 0.85), ("r2", 0.8), ("r3", 0.75)):
    agree = rng.random(n_alerts) < accuracy
    for k in range(n_alerts):
        labels.append(ReviewLabel(f"a{k:03d}", reviewer, bool(truly_useful[k] == agree[k])))

gold = majority_gold_standard(labels)
useful = [g.useful for g in sorted(gold, key=lambda g: int(g.alert_id[1:]))]
print(f"{sum(useful)} of {n_alerts} alerts judged useful by majority vote")
for (a, b), k in sorted(pairwise_kappa(labels).items()):
    print(f"kappa {a}-{b}: {k.kappa:.2f}")
roc = alert_roc(scores, useful)
print(f"alert-score AUC {roc.auc:.3f}, Hanley-McNeil SE {roc.se:.3f}, p {roc.p_value:.2g}")
ref = auc_significance(0.64, 121, 101)
print(f"reference point: AUC 0.64 over 121/101 alerts gives p {ref.p_value:.4f}")
