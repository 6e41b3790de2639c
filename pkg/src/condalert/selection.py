"""Greedy forward selection of feature groups scored by cross-validated AUC."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .learner import TrainConfig, cross_validated_auc

STRATEGIES = ("ranked-pass", "best-remaining")


@dataclass(frozen=True)
class GroupScore:
    group: str
    standalone_cv_auc: float
    flagged: bool = False


@dataclass
class SelectionResult:
    groups: list[str]
    final_cv_auc: float
    audit: list[tuple[str, float, bool]] = field(default_factory=list)

    def write_audit(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "group", "cv_auc", "accepted"])
            for i, (g, a, ok) in enumerate(self.audit):
                w.writerow([i, g, repr(a), int(ok)])


def _columns(groups: dict, names) -> np.ndarray:
    return np.concatenate([groups[g] for g in names])


def score_groups(X, y, groups: dict, cfg: TrainConfig = TrainConfig()) -> list[GroupScore]:
    """Standalone CV AUC of each group, best first (ties broken by group id).

    A group without any variation on the training rows cannot be fit; it
    scores 0.5 and is flagged.
    """
    if not groups:
        raise ValueError("no feature groups to score")
    X = np.asarray(X, dtype=float)
    scores = []
    for g, cols in groups.items():
        sub = X[:, cols]
        if np.all(sub == sub[0]):
            scores.append(GroupScore(g, 0.5, True))
        else:
            scores.append(GroupScore(g, cross_validated_auc(sub, y, cfg)))
    return sorted(scores, key=lambda s: (-s.standalone_cv_auc, s.group))


def greedy_select(X, y, ranked: list[GroupScore], groups: dict,
                  cfg: TrainConfig = TrainConfig(), strategy: str = "ranked-pass",
                  eps: float = 0.001, max_candidates: int = 30,
                  always_eligible: tuple[str, ...] = ()) -> SelectionResult:
    """Grow a group set from the best standalone group while CV AUC improves.

    ``ranked-pass`` visits the top ``max_candidates`` groups once in rank
    order and keeps each one that raises CV AUC by more than ``eps``.
    ``best-remaining`` adds, at every step, the candidate giving the largest
    AUC and stops when that gain is at most ``eps``.
    """
    if not ranked:
        raise ValueError("no ranked groups")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    X = np.asarray(X, dtype=float)
    candidates = [s.group for s in ranked[:max_candidates]]
    candidates += [s.group for s in ranked[max_candidates:] if s.group in always_eligible]

    selected = [candidates[0]]
    best = ranked[0].standalone_cv_auc
    audit = [(candidates[0], best, True)]

    def trial(g):
        return cross_validated_auc(X[:, _columns(groups, selected + [g])], y, cfg)

    if strategy == "ranked-pass":
        for g in candidates[1:]:
            a = trial(g)
            ok = a > best + eps
            audit.append((g, a, ok))
            if ok:
                selected.append(g)
                best = a
    else:
        remaining = candidates[1:]
        while remaining:
            tried = [(trial(g), -k, g) for k, g in enumerate(remaining)]
            a, _, g = max(tried)
            ok = a > best + eps
            audit.extend((gg, aa, ok and gg == g) for aa, _, gg in tried)
            if not ok:
                break
            selected.append(g)
            best = a
            remaining.remove(g)
    return SelectionResult(selected, best, audit)
