import math
from datetime import timedelta

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from condalert.features import (CONTINUOUS_LAB_FEATURES, OTHER_TOKEN, ActionDescriptor,
                                Featurizer, build_action_vector, extract_categorical_lab_features,
                                extract_continuous_lab_features, extract_medication_features,
                                extract_procedure_features, hours, medication_order_changes,
                                segment_record, segment_times, standardize)
from condalert.records import CohortDataset

from conftest import h, lab, make_record, med

F = {name: i for i, name in enumerate(CONTINUOUS_LAB_FEATURES)}
FIXTURE = [(0.0, 120.0), (5.0, 60.0), (10.0, 100.0), (20.0, 80.0)]


def test_fixture_series_matches_hand_formulas():
    out = extract_continuous_lab_features(FIXTURE, 24.0)
    A, B, first, D, apex = 80.0, 100.0, 120.0, 60.0, 120.0
    expected = {"last": A, "second_last": B, "first": first, "last_diff": A - B,
                "last_pct_change": (A - B) / B, "last_slope": (A - B) / (20 - 10),
                "nadir": D, "nadir_diff": A - D, "nadir_pct_diff": (A - D) / D,
                "time_since_nadir": 24 - 5, "apex": apex, "apex_diff": A - apex,
                "apex_pct_diff": (A - apex) / apex, "time_since_apex": 24 - 0,
                "baseline_diff": A - first, "baseline_pct_diff": (A - first) / first,
                "overall_slope": (A - first) / 20, "time_since_last": 4, "time_since_first": 24,
                "time_between_last_two": 10, "count": 4, "mean": 90.0,
                "std": math.sqrt(((30 ** 2) * 2 + (10 ** 2) * 2) / 3),
                "ever_measured": 1, "pending": 0, "measured_last_period": 1}
    for name, v in expected.items():
        assert out[F[name]] == pytest.approx(v, abs=1e-9), name
    # the worked numbers themselves
    assert out[F["last_pct_change"]] == pytest.approx(-0.2)
    assert out[F["nadir_pct_diff"]] == pytest.approx(1 / 3)
    assert out[F["last_slope"]] == pytest.approx(-2.0)


def test_constant_series_has_zero_changes():
    out = extract_continuous_lab_features([(0.0, 50.0), (10.0, 50.0)], 12.0)
    for name in ("last_diff", "last_pct_change", "last_slope", "nadir_diff", "apex_diff",
                 "baseline_diff", "overall_slope"):
        assert out[F[name]] == 0.0
    assert out[F["nadir"]] == out[F["apex"]] == 50.0


def test_single_point_leaves_pairwise_missing():
    out = extract_continuous_lab_features([(2.0, 7.0)], 10.0)
    assert out[F["last"]] == out[F["first"]] == out[F["nadir"]] == out[F["apex"]] == 7.0
    assert out[F["time_since_last"]] == 8.0
    for name in ("second_last", "last_diff", "last_slope", "std", "time_between_last_two"):
        assert math.isnan(out[F[name]])


def test_zero_denominator_marks_percent_missing():
    out = extract_continuous_lab_features([(0.0, 0.0), (1.0, 2.0)], 2.0)
    assert math.isnan(out[F["last_pct_change"]]) and math.isnan(out[F["nadir_pct_diff"]])
    assert out[F["last_diff"]] == 2.0


def test_empty_series_keeps_indicators():
    out = extract_continuous_lab_features([], 5.0, pending=True)
    assert out[F["ever_measured"]] == 0 and out[F["pending"]] == 1 and out[F["count"]] == 0
    assert math.isnan(out[F["last"]])


def test_categorical_features():
    assert extract_categorical_lab_features([(1.0, "POS"), (6.0, "NEG")], False, 10.0) == \
        ["NEG", "POS", "POS", 4.0, True, False, 9.0]
    empty = extract_categorical_lab_features([], True, 3.0)
    assert empty[4] is False and empty[5] is True and empty[0] is None and math.isnan(empty[3])
    one = extract_categorical_lab_features([(2.0, "POS")], False, 3.0)
    assert one[0] == one[2] == "POS" and one[1] is None


def test_medication_features():
    # last dose 18 h before t lies inside the trailing 24 h window
    out = extract_medication_features([0.0, 30.0], medication_order_changes([0.0, 30.0]), 48.0)
    assert out[0] == 1.0 and out[1] == 48.0 and out[2] == 18.0
    assert out[3] == 18.0  # the order lapsed at 24 h and restarted with the 30 h dose
    assert extract_medication_features([47.0], [47.0], 48.0)[0] == 1.0
    never = extract_medication_features([], [], 48.0)
    assert never[0] == 0.0 and np.isnan(never[1:]).all()
    assert extract_medication_features([0.0], [0.0, 24.0], 30.0)[0] == 0.0


def test_order_changes_mark_starts_and_lapses():
    assert medication_order_changes([0.0, 10.0, 60.0]) == [0.0, 34.0, 60.0, 84.0]


def test_procedure_features():
    assert extract_procedure_features([2.0, 50.0], 72.0).tolist() == [1.0, 70.0, 22.0]
    never = extract_procedure_features([], 72.0)
    assert never[0] == 0.0 and np.isnan(never[1:]).all()
    once = extract_procedure_features([5.0], 9.0)
    assert once[1] == once[2]


def test_segmentation_counts():
    rec = make_record(adm=0, dis=80)  # 10:00 admission: anchors at 22, 46, 70 h
    assert [hours(t) - hours(h(0)) for t in segment_times(rec)] == [22, 46, 70]
    assert len(segment_record(rec)) == 3
    # 09:00 admission, 07:00 next-day discharge: no anchor inside the stay
    short = make_record(adm=-1, dis=21)
    assert segment_times(short) == []


def test_features_ignore_events_after_segment_time():
    t = h(22)
    rec = make_record(events=[lab(10, "K", 4.0), lab(22 + 1 / 60, "K", 5.0)])
    (first, *_), = [segment_record(rec)]
    fz = Featurizer.from_cohort(CohortDataset.from_records([rec]))
    col = fz.catalog.labels().index("lab:K:time_since_last")
    assert first.features[col] == pytest.approx(12.0)
    assert first.segment_time == t


def test_action_window_is_half_open():
    acts = [ActionDescriptor("lab_order", "X"), ActionDescriptor("medication_given", "M")]
    rec = make_record(events=[lab(25, "X", 1.0), med(46, "M")])
    assert build_action_vector(rec, h(22), timedelta(hours=24), acts).tolist() == [True, False]
    assert build_action_vector(rec, h(46), timedelta(hours=24), acts).tolist() == [False, True]
    assert not build_action_vector(make_record(), h(22), timedelta(hours=24), acts).any()


def test_catalog_layout(small_cohort):
    fz = Featurizer.from_cohort(small_cohort)
    cols = fz.catalog.group_columns()
    assert len(cols["lab:PLT"]) == 26 + 1
    assert len(cols["med:HEP"]) == 4 + 1
    assert len(cols["proc:CABG"]) == 3 + 1
    # HPF4 vocabulary {POS} plus the other bucket, three slots, four scalars, indicator
    assert len(cols["lab:HPF4"]) == 3 * 2 + 4 + 1
    assert sorted(np.concatenate(list(cols.values())).tolist()) == list(range(len(fz.catalog)))
    assert [a.label for a in fz.actions] == ["lab_order:HPF4", "lab_order:PLT",
                                             "medication_given:ABX", "medication_given:HEP"]


def test_unseen_token_goes_to_other(small_cohort):
    fz = Featurizer.from_cohort(small_cohort)
    rec = make_record("q", [lab(1, "HPF4", "EQUIVOCAL")])
    x = fz.segment_record(rec)[0].features
    labels = fz.catalog.labels()
    assert x[labels.index(f"lab:HPF4:last={OTHER_TOKEN}")] == 1.0
    assert x[labels.index("lab:HPF4:last=POS")] == 0.0


def test_standardize_contract(small_cohort):
    fz = Featurizer.from_cohort(small_cohort)
    raw = fz.featurize(small_cohort)
    z, scaler = standardize(raw)
    assert np.isfinite(z.X).all()
    age = fz.catalog.labels().index("context:age")
    # both patients are 60: zero variance maps to 0
    assert (z.X[:, age] == 0).all()
    cols = fz.catalog.group_columns()["lab:HPF4"]
    ind = cols[-1]
    assert z.X[0, ind] == 1.0  # HPF4 never measured at the first instance
    j = fz.catalog.labels().index("lab:PLT:last")
    m, s = scaler.mean[j], scaler.scale[j]
    assert z.X[2, j] == pytest.approx((raw.X[2, j] - m) / s)


def test_standardize_formula():
    from condalert.features import FeatureCatalog, FeatureDescriptor, fit_scaler
    cat = FeatureCatalog((FeatureDescriptor("g", "v"), FeatureDescriptor("g", "missing", kind="missing")))
    X = np.array([[8.0, 0.0], [12.0, 0.0], [np.nan, 0.0]])
    sc = fit_scaler(X, cat)
    assert sc.mean[0] == 10.0 and sc.scale[0] == 2.0
    Z = sc.transform(np.array([[14.0, 0.0], [np.nan, 0.0]]))
    assert Z.tolist() == [[2.0, 0.0], [0.0, 1.0]]


def test_prev_links(small_cohort):
    fz = Featurizer.from_cohort(small_cohort)
    inst = fz.featurize(small_cohort)
    for i, p in enumerate(inst.prev_index):
        if p >= 0:
            assert inst.patient_ids[p] == inst.patient_ids[i]
            assert inst.times[i] - inst.times[p] == timedelta(hours=24)


# --- properties ------------------------------------------------------------------

series_st = st.lists(st.tuples(st.integers(0, 200), st.integers(1, 500)), min_size=1, max_size=12,
                     unique_by=lambda s: s[0])


@settings(max_examples=200, deadline=None)
@given(series_st)
def test_nadir_apex_bound_every_value(raw):
    series = [(float(t), float(v)) for t, v in raw]
    out = extract_continuous_lab_features(series, 250.0)
    vals = [v for _, v in series]
    assert out[F["nadir"]] <= min(vals) and out[F["apex"]] >= max(vals)
    assert out[F["nadir_diff"]] >= 0 and out[F["apex_diff"]] <= 0
    again = extract_continuous_lab_features(series, 250.0)
    assert np.array_equal(out, again, equal_nan=True)


@st.composite
def stays(draw):
    stay = draw(st.integers(30, 110))
    evs = []
    for _ in range(draw(st.integers(0, 10))):
        t = draw(st.integers(0, stay * 4 - 1)) / 4.0
        evs.append(draw(st.sampled_from([lab(t, "K", float(draw(st.integers(1, 9)))),
                                         med(t, "M")])))
    return make_record(events=evs, dis=float(stay))


@settings(max_examples=60, deadline=None)
@given(stays(), st.integers(0, 200))
def test_causality(rec, shift):
    fz = Featurizer(["K"], [], ["M"], [], {}, ["F"], ["white"])
    base = fz.segment_record(rec)
    for k, inst in enumerate(base):
        late = [(hours(e.timestamp) - hours(h(0)), e) for e in rec.events]
        cut = hours(inst.segment_time) - hours(h(0))
        perturbed = make_record(events=[(t, e.channel_kind, e.code, e.value, e.order_status)
                                        for t, e in late if t <= cut]
                                + [lab(min(cut + 0.25 + shift / 100, hours(rec.discharge_time) - hours(h(0))), "K", 99.0)],
                                dis=hours(rec.discharge_time) - hours(h(0)))
        assert np.array_equal(fz.segment_record(perturbed)[k].features, inst.features, equal_nan=True)


@settings(max_examples=60, deadline=None)
@given(stays())
def test_each_action_event_counted_once(rec):
    fz = Featurizer(["K"], [], ["M"], [], {}, ["F"], ["white"])
    insts = fz.segment_record(rec)
    if not insts:
        return
    lo, hi = insts[0].segment_time, insts[-1].segment_time + fz.period
    for j, a in enumerate(fz.actions):
        kind = "lab" if a.action_kind == "lab_order" else "medication"
        for e in rec.events:
            if e.channel_kind == kind and e.code == a.code and lo <= e.timestamp < hi:
                owners = [i for i in insts if i.segment_time <= e.timestamp < i.segment_time + fz.period]
                assert len(owners) == 1 and owners[0].actions[j]
