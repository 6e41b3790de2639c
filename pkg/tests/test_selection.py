import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from condalert.learner import TrainConfig, cross_validated_auc
from condalert.selection import GroupScore, greedy_select, score_groups

CFG = TrainConfig(C=0.1)


def one_signal_data(seed, n=300, n_noise=4, width=3, shift=0.9):
    """Group ``sig`` predicts the label; every other group is pure noise."""
    rng = np.random.default_rng(seed)
    y = np.where(rng.random(n) < 0.4, 1.0, -1.0)
    blocks = {"sig": rng.normal(size=(n, width)) + shift * y[:, None] * np.array([1.0, 0.5, 0.0])}
    for k in range(n_noise):
        blocks[f"noise{k}"] = rng.normal(size=(n, width))
    X = np.hstack(list(blocks.values()))
    groups = {g: np.arange(i * width, (i + 1) * width) for i, g in enumerate(blocks)}
    return X, y, groups


def test_perfect_group_ranked_first():
    X, y, groups = one_signal_data(0)
    X = np.column_stack([X, y])
    groups["copy"] = np.array([X.shape[1] - 1])
    ranked = score_groups(X, y, groups, CFG)
    assert ranked[0] == GroupScore("copy", 1.0)


def test_noise_groups_score_near_half():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(800, 6))
    y = np.where(rng.random(800) < 0.5, 1.0, -1.0)
    for s in score_groups(X, y, {"a": np.arange(3), "b": np.arange(3, 6)}, CFG):
        assert abs(s.standalone_cv_auc - 0.5) <= 0.07


def test_identical_groups_tie_by_id():
    X, y, groups = one_signal_data(1)
    groups["sig_b"] = groups["sig"]
    ranked = score_groups(X, y, {"sig_b": groups["sig"], "sig": groups["sig"]}, CFG)
    assert [r.group for r in ranked] == ["sig", "sig_b"]
    assert ranked[0].standalone_cv_auc == ranked[1].standalone_cv_auc


def test_constant_group_flagged():
    X, y, groups = one_signal_data(2)
    X = np.column_stack([X, np.zeros(len(y))])
    groups["flat"] = np.array([X.shape[1] - 1])
    flat = [s for s in score_groups(X, y, groups, CFG) if s.group == "flat"][0]
    assert flat.flagged and flat.standalone_cv_auc == 0.5


@pytest.mark.parametrize("seed", range(3))
def test_noisy_copy_of_selected_group_adds_nothing(seed):
    X, y, groups = one_signal_data(seed, n=1000, shift=1.5)
    rng = np.random.default_rng(100 + seed)
    X = np.hstack([X, X[:, groups["sig"]] + rng.normal(size=(len(y), 3))])
    groups["sig_copy"] = np.arange(X.shape[1] - 3, X.shape[1])
    ranked = score_groups(X, y, groups, CFG)
    res = greedy_select(X, y, ranked, groups, CFG)
    assert len([g for g in res.groups if g.startswith("sig")]) == 1


def test_single_group_identity():
    X, y, groups = one_signal_data(4, n_noise=0)
    ranked = score_groups(X, y, groups, CFG)
    res = greedy_select(X, y, ranked, groups, CFG)
    assert res.groups == ["sig"] and res.final_cv_auc == ranked[0].standalone_cv_auc


@pytest.mark.parametrize("strategy", ["ranked-pass", "best-remaining"])
def test_complementary_groups_both_selected(strategy):
    rng = np.random.default_rng(6)
    n = 500
    y = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    a = rng.normal(size=(n, 1)) + 0.8 * y[:, None]
    b = rng.normal(size=(n, 1)) + 0.8 * y[:, None]
    X = np.hstack([a, b, rng.normal(size=(n, 2))])
    groups = {"a": np.array([0]), "b": np.array([1]), "n": np.array([2, 3])}
    ranked = score_groups(X, y, groups, CFG)
    res = greedy_select(X, y, ranked, groups, CFG, strategy)
    assert {"a", "b"} <= set(res.groups)
    assert res.final_cv_auc > max(s.standalone_cv_auc for s in ranked if s.group in "ab")


def test_unknown_strategy_rejected():
    X, y, groups = one_signal_data(0)
    with pytest.raises(ValueError):
        greedy_select(X, y, score_groups(X, y, groups, CFG), groups, CFG, "random")


def test_always_eligible_group_beyond_cap_is_tried():
    X, y, groups = one_signal_data(7, n_noise=3)
    ranked = score_groups(X, y, groups, CFG)
    last = ranked[-1].group
    res = greedy_select(X, y, ranked, groups, CFG, max_candidates=2, always_eligible=(last,))
    assert last in [a[0] for a in res.audit]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["ranked-pass", "best-remaining"]),
       st.integers(1, 5))
def test_result_invariants(seed, strategy, k):
    X, y, groups = one_signal_data(seed, n=150, n_noise=3)
    ranked = score_groups(X, y, groups, CFG)
    res = greedy_select(X, y, ranked, groups, CFG, strategy, 0.001, k)
    top = {s.group for s in ranked[:k]}
    assert len(set(res.groups)) == len(res.groups) and set(res.groups) <= top
    assert res.final_cv_auc >= ranked[0].standalone_cv_auc - 0.001
    accepted = [a for g, a, ok in res.audit if ok]
    assert all(b > a for a, b in zip(accepted, accepted[1:]))
    # the reported score is what a refit on the chosen columns gives
    cols = np.concatenate([groups[g] for g in res.groups])
    assert cross_validated_auc(X[:, cols], y, CFG) == res.final_cv_auc
