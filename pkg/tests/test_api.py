import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from apsope import ApsOffPolicyEvaluator, ApsTransformer, ContextScaler, ScoreThreshold, Uniform, compute_aps
from apsope.exceptions import ConfigError, UnknownAction


def halfspace_data(rng, n=4000):
    X = rng.normal(size=(n, 3)) * [2.0, 1.0, 1.0] + 1.0
    A = 1 + (X[:, 0] >= 1.0)
    Y = X[:, 1] ** 2 + 0.8 * (A == 2) + rng.normal(size=n)
    return X, A, Y, ScoreThreshold(np.array([1.0, 0, 0]), 1.0)


def test_scaler_round_trip(rng):
    X = rng.normal(size=(50, 3)) * 3 + 2
    X[:, 2] = 7.0
    sc = ContextScaler().fit(X)
    Z = sc.transform(X)
    np.testing.assert_allclose(Z[:, :2].mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(Z[:, :2].std(axis=0), 1, atol=1e-12)
    assert sc.zero_variance_ == (2,)
    np.testing.assert_allclose(sc.inverse_transform(Z), X, atol=1e-12)


def test_not_fitted():
    with pytest.raises(NotFittedError):
        ContextScaler().transform(np.zeros((2, 2)))
    with pytest.raises(NotFittedError):
        ApsOffPolicyEvaluator(Uniform(2)).evaluate(Uniform(2))


def test_transformer_matches_functional_core(rng):
    X, _, _, pol = halfspace_data(rng, 500)
    tr = ApsTransformer(pol, delta=0.5, draws=40, random_state=3)
    P = tr.fit_transform(X)
    from apsope import ContextMatrix

    np.testing.assert_array_equal(P, compute_aps(ContextMatrix(X), pol, 0.5, 40, 3).p_hat)
    assert tr.get_params()["delta"] == 0.5
    assert clone(tr).get_params()["random_state"] == 3


def test_transformer_in_pipeline(rng):
    X, _, _, pol = halfspace_data(rng, 200)
    pipe = make_pipeline(ApsTransformer(pol, delta=1.0, draws=20))
    assert pipe.fit_transform(X).shape == (200, 2)


def test_evaluator_recovers_effect_and_identity(rng):
    X, A, Y, pol = halfspace_data(rng)
    ev = ApsOffPolicyEvaluator(pol, delta=0.5, draws=100, random_state=1).fit(X, A, Y)
    fit = ev.effects_.fits[2]
    assert abs(ev.coef_[0] - 0.8) <= 3 * fit.se_beta_robust
    assert ev.score(pol) == pytest.approx(Y.mean(), abs=1e-12)
    always2 = ScoreThreshold(np.zeros(3), -1.0)
    shift = 1 - pol.evaluate(X)[:, 1].mean()
    assert ev.score(always2) == pytest.approx(Y.mean() + ev.coef_[0] * shift, abs=1e-12)


def test_evaluator_validation(rng):
    X, A, Y, pol = halfspace_data(rng, 100)
    with pytest.raises(ConfigError):
        ApsOffPolicyEvaluator(logging_policy="nope").fit(X, A, Y)
    with pytest.raises(UnknownAction):
        ApsOffPolicyEvaluator(pol).fit(X, A + 5, Y)
    with pytest.raises(ValueError):
        ApsOffPolicyEvaluator(pol).fit(np.full((100, 3), np.nan), A, Y)
