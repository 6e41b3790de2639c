"""Analysis of reviewed alerts: gold standard, agreement, ROC and binned rates."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .learner import auc


@dataclass(frozen=True)
class ReviewLabel:
    alert_id: str
    reviewer_id: str
    useful: bool


@dataclass(frozen=True)
class GoldStandardLabel:
    alert_id: str
    useful: bool
    votes_useful: int
    votes_total: int


@dataclass(frozen=True)
class BinSummary:
    lower: float
    width: float
    n: int
    n_useful: int

    @property
    def upper(self) -> float:
        return self.lower + self.width

    @property
    def midpoint(self) -> float:
        return self.lower + self.width / 2.0

    @property
    def true_alert_rate(self) -> float:
        return self.n_useful / self.n if self.n else math.nan


@dataclass(frozen=True)
class RocSummary:
    auc: float
    se: float
    z: float
    p_value: float
    n_pos: int
    n_neg: int


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    slope_se: float
    p_value: float
    mode: str

    def __iter__(self):
        return iter((self.slope, self.intercept))


@dataclass(frozen=True)
class KappaResult:
    kappa: float
    observed: float
    expected: float
    degenerate: bool = False

    def __float__(self):
        return self.kappa


def majority_gold_standard(labels: Iterable[ReviewLabel]) -> list[GoldStandardLabel]:
    """Useful iff a strict majority of an alert's reviewers said so."""
    votes: dict[str, dict[str, bool]] = defaultdict(dict)
    for lab in labels:
        if lab.reviewer_id in votes[lab.alert_id]:
            raise ValueError(f"reviewer {lab.reviewer_id} labeled {lab.alert_id} twice")
        votes[lab.alert_id][lab.reviewer_id] = bool(lab.useful)
    out = []
    for alert_id in sorted(votes):
        v = list(votes[alert_id].values())
        if len(v) < 3 or len(v) % 2 == 0:
            raise ValueError(f"alert {alert_id} has {len(v)} labels; need an odd count >= 3")
        k = sum(v)
        out.append(GoldStandardLabel(alert_id, 2 * k > len(v), k, len(v)))
    return out


def cohen_kappa(a: Sequence[bool], b: Sequence[bool]) -> KappaResult:
    """Chance-corrected agreement of two binary raters.

    When chance agreement is 1 (both raters constant on the same label) the
    ratio is undefined; kappa is then 1 for perfect agreement, else 0, and the
    result is flagged degenerate.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape or a.size == 0:
        raise ValueError("kappa needs two equal-length, non-empty label lists")
    p_o = float(np.mean(a == b))
    pa, pb = a.mean(), b.mean()
    p_e = float(pa * pb + (1 - pa) * (1 - pb))
    if p_e >= 1.0:
        return KappaResult(1.0 if p_o == 1.0 else 0.0, p_o, p_e, True)
    return KappaResult((p_o - p_e) / (1.0 - p_e), p_o, p_e)


def pairwise_kappa(labels: Iterable[ReviewLabel]) -> dict[tuple[str, str], KappaResult]:
    """Kappa for every reviewer pair over the alerts both reviewed."""
    by_rev: dict[str, dict[str, bool]] = defaultdict(dict)
    for lab in labels:
        by_rev[lab.reviewer_id][lab.alert_id] = bool(lab.useful)
    out = {}
    for r1, r2 in combinations(sorted(by_rev), 2):
        shared = sorted(set(by_rev[r1]) & set(by_rev[r2]))
        if shared:
            out[(r1, r2)] = cohen_kappa([by_rev[r1][i] for i in shared],
                                        [by_rev[r2][i] for i in shared])
    return out


def hanley_mcneil_se(area: float, n_pos: int, n_neg: int) -> float:
    q1 = area / (2.0 - area)
    q2 = 2.0 * area * area / (1.0 + area)
    var = (area * (1 - area) + (n_pos - 1) * (q1 - area ** 2)
           + (n_neg - 1) * (q2 - area ** 2)) / (n_pos * n_neg)
    return math.sqrt(max(var, 0.0))


def auc_significance(area: float, n_pos: int, n_neg: int) -> RocSummary:
    """Two-sided normal test of AUC != 0.5 with the Hanley-McNeil SE."""
    se = hanley_mcneil_se(area, n_pos, n_neg)
    if se == 0:
        z = math.inf if area != 0.5 else 0.0
    else:
        z = (area - 0.5) / se
    p = float(2.0 * stats.norm.sf(abs(z)))
    return RocSummary(area, se, z, p, n_pos, n_neg)


def alert_roc(scores: Sequence[float], useful: Sequence[bool]) -> RocSummary:
    useful = np.asarray(useful, dtype=bool)
    area = auc(scores, useful)
    return auc_significance(area, int(useful.sum()), int((~useful).sum()))


def _bin_index(scores: np.ndarray, width: float) -> tuple[np.ndarray, int]:
    n_bins = int(round(1.0 / width))
    idx = np.floor(np.asarray(scores, dtype=float) / width + 1e-12).astype(int)
    return np.clip(idx, 0, n_bins - 1), n_bins


def binned_true_alert_rate(scores: Sequence[float], useful: Sequence[bool],
                           width: float = 0.2) -> list[BinSummary]:
    """Half-open bins [k w, (k+1) w) over [0, 1]; the last bin is closed."""
    scores = np.asarray(scores, dtype=float)
    useful = np.asarray(useful, dtype=bool)
    if np.any((scores < 0) | (scores > 1)):
        raise ValueError("alert scores must lie in [0, 1]")
    idx, n_bins = _bin_index(scores, width)
    return [BinSummary(round(k * width, 10), width, int(np.sum(idx == k)),
                       int(np.sum(useful[idx == k]))) for k in range(n_bins)]


def score_histogram(scores: Sequence[float], width: float = 0.2) -> list[int]:
    if len(scores) == 0:
        return [0] * int(round(1.0 / width))
    idx, n_bins = _bin_index(scores, width)
    return np.bincount(idx, minlength=n_bins).tolist()


def _wls(x, y, w, mode) -> LinearFit:
    x, y, w = (np.asarray(v, dtype=float) for v in (x, y, w))
    sw = w.sum()
    xm, ym = (w @ x) / sw, (w @ y) / sw
    sxx = w @ (x - xm) ** 2
    if sxx <= 0:
        raise ValueError("need at least two distinct x values")
    slope = (w @ ((x - xm) * (y - ym))) / sxx
    intercept = ym - slope * xm
    dof = len(x) - 2
    if dof > 0:
        resid = y - intercept - slope * x
        sigma2 = (w @ resid ** 2) / dof
        se = math.sqrt(sigma2 / sxx)
        if se > 0:
            p = float(2.0 * stats.t.sf(abs(slope / se), dof))
        else:
            p = 0.0 if slope != 0 else 1.0
    else:
        se, p = math.nan, math.nan
    return LinearFit(float(slope), float(intercept), se, p, mode)


def linear_fit(bins: Sequence[BinSummary]) -> LinearFit:
    """Least-squares line through (bin midpoint, true alert rate), weighted by bin size."""
    full = [b for b in bins if b.n > 0]
    if len(full) < 2:
        raise ValueError("linear fit needs at least two nonempty bins")
    return _wls([b.midpoint for b in full], [b.true_alert_rate for b in full],
                [b.n for b in full], "bins")


def linear_fit_raw(scores: Sequence[float], useful: Sequence[bool]) -> LinearFit:
    """Ordinary least squares of the 0/1 usefulness on the raw alert score."""
    return _wls(scores, np.asarray(useful, dtype=float), np.ones(len(scores)), "raw")
