import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from apsope import (
    ContextMatrix,
    LinearGreedy,
    LogDataset,
    QuantileGate,
    ScoreThreshold,
    TableLookup,
    UcbTable,
    Uniform,
    load_policy,
    policy_from_dict,
    save_policy,
)
from apsope.exceptions import ConfigError, DegenerateDeciles, DimensionMismatch, RankDeficient
from apsope.policy import fit_linear_reward_model, train_ucb

from conftest import make_dataset


def _gate(p=3):
    greedy = LinearGreedy(np.array([0.0, 0.5, 0.2]), np.arange(3 * p, dtype=float).reshape(3, p) / 10 - 0.4)
    return QuantileGate(0, 1.0, Uniform(3), greedy)


def _table():
    rules = (({0: (0.0, 1.0)}, np.array([0.5, 0.5, 0.0])), ({1: (-1.0, 0.0)}, np.array([0.0, 0.0, 1.0])))
    return TableLookup(rules, np.array([1.0, 0.0, 0.0]), n_inputs=3)


def _ucb():
    q = np.arange(3 * 3 * 3, dtype=float).reshape(3, 3, 3) % 5 / 5
    counts = np.full((3, 3, 3), 7)
    counts[2, 0, 0] = 0
    return UcbTable((0, 2), np.array([-0.5, 0.5]), np.array([-1.0, 1.0]), q, counts, 1.5, 100, 3)


ALL_POLICIES = [
    Uniform(3),
    LinearGreedy(np.array([0.0, 1.0, -1.0]), np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])),
    _gate(),
    ScoreThreshold(np.array([1.0, -2.0, 0.5]), 0.3, bias=0.1),
    _table(),
    _ucb(),
]

rows = arrays(np.float64, (3,), elements=st.floats(-5, 5, allow_nan=False))


@pytest.mark.parametrize("policy", ALL_POLICIES, ids=lambda p: type(p).__name__)
@given(x=rows)
def test_outputs_are_distributions(policy, x):
    out = policy.evaluate(x)
    assert out.shape == (policy.m,)
    assert np.all((out >= 0) & (out <= 1))
    assert abs(out.sum() - 1.0) <= 1e-12
    if getattr(policy, "deterministic", False):
        assert np.isin(out, (0.0, 1.0)).all() and out.sum() == 1.0


@pytest.mark.parametrize("policy", ALL_POLICIES, ids=lambda p: type(p).__name__)
def test_feature_map_reproduces_direct_evaluation(policy, rng):
    X = rng.normal(size=(200, 3)) * 2
    W = policy.feature_map()
    if W.shape[0] == 0:
        return
    np.testing.assert_array_equal(policy.from_features(X @ W.T), policy.evaluate(X))


@pytest.mark.parametrize("policy", ALL_POLICIES, ids=lambda p: type(p).__name__)
def test_json_round_trip(policy, tmp_path, rng):
    save_policy(policy, tmp_path / "p.json")
    back = load_policy(tmp_path / "p.json")
    X = rng.normal(size=(50, 3))
    np.testing.assert_array_equal(back.evaluate(X), policy.evaluate(X))
    assert json.loads(json.dumps(policy.to_dict())) == back.to_dict()


def test_uniform_five():
    np.testing.assert_array_equal(Uniform(5).evaluate(np.array([3.0, -1.0])), [0.2] * 5)


def test_linear_greedy_picks_highest_score():
    pol = LinearGreedy(np.array([1.0, 3.0, 2.0]), np.zeros((3, 2)))
    np.testing.assert_array_equal(pol.evaluate(np.array([0.4, 0.9])), [0, 1, 0])


def test_linear_greedy_ties_go_to_lowest_index():
    pol = LinearGreedy(np.array([2.0, 2.0, 1.0]), np.zeros((3, 1)))
    np.testing.assert_array_equal(pol.evaluate(np.array([0.0])), [1, 0, 0])


@given(x=rows, shift=st.floats(-100, 100, allow_nan=False))
def test_linear_greedy_shift_invariance(x, shift):
    base = ALL_POLICIES[1]
    moved = LinearGreedy(base.intercepts + shift, base.coefs)
    np.testing.assert_array_equal(moved.evaluate(x), base.evaluate(x))


def test_gate_above_threshold_is_ab_segment():
    pol = QuantileGate(0, 2.33, Uniform(5), LinearGreedy(np.arange(5.0), np.zeros((5, 2))))
    np.testing.assert_array_equal(pol.evaluate(np.array([3.0, 0.0])), [0.2] * 5)
    np.testing.assert_array_equal(pol.evaluate(np.array([2.0, 0.0])), [0, 0, 0, 0, 1])


def test_gate_matches_children_on_grid():
    pol = _gate()
    g = np.linspace(-3, 3, 25)
    X = np.array(np.meshgrid(g, g, [0.0, 1.0])).reshape(3, -1).T
    expect = np.where((X[:, 0] >= 1.0)[:, None], pol.inside.evaluate(X), pol.outside.evaluate(X))
    np.testing.assert_array_equal(pol.evaluate(X), expect)


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        ALL_POLICIES[1].evaluate(np.zeros(4))
    with pytest.raises(DimensionMismatch):
        _table().evaluate(np.zeros((2, 2)))


def test_table_first_rule_wins():
    pol = _table()
    np.testing.assert_array_equal(pol.evaluate(np.array([0.5, -0.5, 0.0])), [0.5, 0.5, 0.0])
    np.testing.assert_array_equal(pol.evaluate(np.array([2.0, -0.5, 0.0])), [0, 0, 1])
    np.testing.assert_array_equal(pol.evaluate(np.array([2.0, 0.5, 0.0])), [1, 0, 0])


def test_bad_policy_documents():
    with pytest.raises(ConfigError):
        policy_from_dict({"type": "forest"})
    with pytest.raises(ConfigError):
        policy_from_dict({"type": "linear_greedy"})
    with pytest.raises(ConfigError):
        TableLookup(((({0: (0, 1)}), np.array([0.7, 0.7])),), np.array([1.0, 0.0]), 1)


# ------------------------------------------------------------------ training


def test_linear_model_recovers_noiseless_coefficients(rng):
    n, p, m = 300, 4, 3
    b = rng.normal(size=m)
    C = rng.normal(size=(m, p))
    X = rng.normal(size=(n, p))
    A = np.tile(np.arange(1, m + 1), n // m)
    Y = b[A - 1] + np.einsum("ij,ij->i", X, C[A - 1])
    fit = fit_linear_reward_model(make_dataset(X, A, Y, m))
    np.testing.assert_allclose(fit.intercepts, b, atol=1e-8)
    np.testing.assert_allclose(fit.coefs, C, atol=1e-8)
    assert not fit.rank_deficient


def test_linear_model_absent_action():
    X = np.random.default_rng(0).normal(size=(20, 2))
    with pytest.raises(RankDeficient):
        fit_linear_reward_model(make_dataset(X, [1] * 20, np.zeros(20), m=2))


def test_linear_model_duplicate_rows(rng):
    X = rng.normal(size=(60, 2))
    A = rng.integers(1, 3, size=60)
    Y = rng.normal(size=60)
    one = fit_linear_reward_model(make_dataset(X, A, Y, 2))
    two = fit_linear_reward_model(make_dataset(np.vstack([X, X]), np.concatenate([A, A]), np.concatenate([Y, Y]), 2))
    np.testing.assert_allclose(two.intercepts, one.intercepts, atol=1e-10)
    np.testing.assert_allclose(two.coefs, one.coefs, atol=1e-10)


def _single_cell(q, counts, c):
    q = np.asarray(q, float).reshape(-1, 1, 1)
    counts = np.asarray(counts).reshape(-1, 1, 1)
    return UcbTable((0, 1), np.array([]), np.array([]), q, counts, c, 1010, 2)


def test_ucb_bonus_favours_rare_action():
    pol = _single_cell([1.0, 1.0], [10, 1000], 2.0)
    np.testing.assert_array_equal(pol.evaluate(np.zeros(2)), [1, 0])


def test_ucb_zero_exploration_is_greedy():
    pol = _single_cell([1.0, 1.2], [10, 1000], 0.0)
    np.testing.assert_array_equal(pol.evaluate(np.zeros(2)), [0, 1])


def test_ucb_hand_computed_cells():
    q = np.array([[[0.5], [1.0]], [[0.8], [0.2]]])
    counts = np.array([[[4], [9]], [[16], [1]]])
    pol = UcbTable((0, 1), np.array([0.0]), np.array([]), q, counts, 1.0, 100, 2)
    L = math.log(100)
    expect_low = [0.5 + math.sqrt(L / 4), 0.8 + math.sqrt(L / 16)]
    expect_high = [1.0 + math.sqrt(L / 9), 0.2 + math.sqrt(L / 1)]
    got = pol.ucb_values(np.array([[-1.0, 0.0], [0.0, 0.0], [1e-9, 0.0]]))
    np.testing.assert_allclose(got[0], expect_low, atol=1e-12)
    np.testing.assert_allclose(got[1], expect_low, atol=1e-12)  # right-closed bins: cut value stays low
    np.testing.assert_allclose(got[2], expect_high, atol=1e-12)


def test_ucb_empty_cell_wins_and_out_of_range_clamps():
    pol = _ucb()
    assert pol.evaluate(np.array([-100.0, 0.0, -100.0]))[2] == 1.0
    np.testing.assert_array_equal(pol.evaluate(np.array([100.0, 0, 100.0])), pol.evaluate(np.array([0.6, 0, 1.1])))


def test_train_ucb_counts_and_means(rng):
    n = 2000
    X = rng.normal(size=(n, 2))
    A = rng.integers(1, 4, size=n)
    Y = rng.normal(size=n) + A
    pol = train_ucb(make_dataset(X, A, Y, 3), c=2.0)
    assert pol.counts.sum() == n
    d1, d2 = pol.bins(X[:, 0], X[:, 1])
    sel = (A == 2) & (d1 == 4) & (d2 == 7)
    assert pol.counts[1, 4, 7] == sel.sum()
    assert pol.q_values[1, 4, 7] == pytest.approx(Y[sel].mean(), abs=1e-12)
    assert np.all(np.bincount(d1, minlength=10) >= n // 10 - 1)


def test_train_ucb_degenerate_deciles():
    X = np.column_stack([np.repeat(np.arange(5.0), 10), np.arange(50.0)])
    with pytest.raises(DegenerateDeciles):
        train_ucb(make_dataset(X, np.tile([1, 2], 25), np.zeros(50), 2))
