"""Shared builders for small hand-made cohorts."""

from datetime import datetime, timedelta

import pytest

from condalert.records import CohortDataset, Demographics, PatientRecord, RawEvent

T0 = datetime(2004, 3, 1, 10, 0)


def h(hours: float) -> datetime:
    return T0 + timedelta(hours=hours)


def make_record(pid="p1", events=(), adm=0.0, dis=80.0, devices=(False,) * 4, age=60.0):
    evs = tuple(sorted((RawEvent(pid, h(t), kind, code, value, status)
                        for t, kind, code, value, status in events),
                       key=lambda e: e.timestamp))
    return PatientRecord(pid, h(adm), h(dis), Demographics("F", age, "white"), evs, devices)


def lab(t, code, value, status="resulted"):
    return (t, "lab", code, value, status)


def med(t, code):
    return (t, "medication", code, None, None)


@pytest.fixture
def small_cohort():
    """Two patients; p1 has a falling PLT series, heparin and an HPF4 order."""
    p1 = make_record("p1", [lab(1, "PLT", 200.0), lab(23, "PLT", 150.0), lab(47, "PLT", 90.0),
                            med(2, "HEP"), med(26, "HEP"), lab(50, "HPF4", "POS"),
                            (1.5, "procedure", "CABG", None, None)])
    p2 = make_record("p2", [lab(2, "PLT", 220.0), lab(30, "PLT", 210.0), med(25, "ABX")],
                     adm=1.0, dis=60.0, devices=(True, False, False, False))
    return CohortDataset.from_records([p1, p2])
