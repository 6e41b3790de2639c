"""One patient, one conditional outlier.

Platelets fall while heparin is running, which normally triggers a
confirmatory HPF4 order.  We train on a synthetic cohort, then ask the HPF4
model how surprising it is that nobody ordered the test.
"""

from datetime import datetime, timedelta

from condalert.alerts import anomaly_score
from condalert.features import segment_times
from condalert.pipeline import PipelineConfig, featurize_for_scoring, prepare_training, train_models
from condalert.records import CohortDataset, Demographics, PatientRecord, RawEvent
from condalert.synth import demo_spec, generate_cohort

ds, _ = generate_cohort(demo_spec(seed=4, rho=0.0))
cfg = PipelineConfig()
train, _, dropped = prepare_training(ds, cfg)
art = train_models(train, cfg, dropped)
hpf4 = next(m for m in art.models if m.action == "lab_order:HPF4")
print(f"HPF4 model: cv_auc={hpf4.cv_auc:.3f}, groups={hpf4.selected_groups}")

adm = datetime(2006, 3, 1, 10, 0)
events = []
for day, plt in enumerate([240, 210, 150, 105, 80]):
    t = adm + timedelta(days=day, hours=1)
    events.append(RawEvent("demo", t, "lab", "PLT", float(plt), "resulted"))
    events.append(RawEvent("demo", t + timedelta(minutes=30), "medication", "HEPARIN"))
rec = PatientRecord("demo", adm, adm + timedelta(days=5, hours=4), Demographics("F", 67, "white"),
                    tuple(events), (False, False, False, False))
inst = featurize_for_scoring(CohortDataset((rec,)), art.featurizer, art.scaler, dropped)
j = [a.label for a in art.featurizer.actions].index("lab_order:HPF4")
for i, t in enumerate(inst.times):
    observed = bool(inst.Y[i, j])
    score = anomaly_score(hpf4, inst.X[i], observed)
    print(f"{t:%Y-%m-%d %H:%M}  HPF4 ordered next day: {observed!s:5}  anomaly {score:.3f}")
print("segmentation points:", [f"{t:%m-%d %H:%M}" for t in segment_times(rec)][:3], "...")
