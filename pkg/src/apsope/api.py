"""scikit-learn style wrappers around the functional core.

``ContextScaler`` and ``ApsTransformer`` are transformers; ``ApsOffPolicyEvaluator``
fits the pairwise effects once and then values any number of target policies.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .aps import DEFAULT_DRAWS, compute_aps
from .core import ContextMatrix, LogDataset, RngPlan
from .estimator import estimate_value, resolve_effects
from .exceptions import ConfigError, DataError, DimensionMismatch, UnknownAction
from .policy import Policy


def _check_contexts(X, estimator=None) -> np.ndarray:
    return check_array(X, dtype=float, ensure_min_samples=2, estimator=estimator)


def _check_policy(policy, name):
    if not isinstance(policy, Policy):
        raise ConfigError(f"{name} must be a Policy, got {type(policy).__name__}", field=name)
    return policy


class ContextScaler(TransformerMixin, BaseEstimator):
    """Z-score continuous columns with population statistics.

    Columns with zero variance are passed through unscaled and listed in
    ``zero_variance_``.

    Attributes
    ----------
    mean_ : ndarray of shape (n_features,)
    scale_ : ndarray of shape (n_features,)
    zero_variance_ : tuple of int
    n_features_in_ : int
    """

    def fit(self, X, y=None):
        X = _check_contexts(X, self)
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        flat = ~(scale > 0)
        mean[flat] = 0.0
        scale[flat] = 1.0
        self.mean_ = mean
        self.scale_ = scale
        self.zero_variance_ = tuple(int(j) for j in np.flatnonzero(flat))
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_array(X, dtype=float, estimator=self)
        if X.shape[1] != self.n_features_in_:
            raise DimensionMismatch(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        return (X - self.mean_) / self.scale_

    def inverse_transform(self, Z):
        check_is_fitted(self, "mean_")
        Z = check_array(Z, dtype=float, estimator=self)
        return Z * self.scale_ + self.mean_

    def to_context_matrix(self, X) -> ContextMatrix:
        """Normalized ``ContextMatrix`` carrying the fitted statistics."""
        Z = self.transform(X)
        return ContextMatrix(
            values=Z,
            col_means=self.mean_,
            col_stds=self.scale_,
            normalized=True,
            zero_variance=self.zero_variance_,
        )


class ApsTransformer(TransformerMixin, BaseEstimator):
    """Map raw contexts to simulated approximate propensity scores.

    Parameters
    ----------
    policy : Policy
        Logging policy. It reads raw (unnormalized) contexts.
    delta : float, default=1.0
        Ball radius in normalized units.
    draws : int, default=100
        Monte Carlo draws per record.
    random_state : int, default=0
        Master seed. There is no unseeded mode.
    threads : int, default=1
        Worker threads. The output does not depend on it.

    Notes
    -----
    ``fit`` learns the normalization; ``transform`` returns ``p_hat`` of shape
    ``(n_samples, m)``. The full table of the last call is kept in ``table_``.
    """

    def __init__(self, policy=None, delta=1.0, draws=DEFAULT_DRAWS, random_state=0, threads=1):
        self.policy = policy
        self.delta = delta
        self.draws = draws
        self.random_state = random_state
        self.threads = threads

    def fit(self, X, y=None):
        _check_policy(self.policy, "policy")
        self.scaler_ = ContextScaler().fit(X)
        self.n_features_in_ = self.scaler_.n_features_in_
        return self

    def transform(self, X):
        check_is_fitted(self, "scaler_")
        ctx = self.scaler_.to_context_matrix(X)
        self.table_ = compute_aps(ctx, self.policy, self.delta, self.draws, RngPlan(int(self.random_state)), self.threads)
        return np.array(self.table_.p_hat)


class ApsOffPolicyEvaluator(BaseEstimator):
    """Value a target policy from logs of a possibly deterministic logging policy.

    Parameters
    ----------
    logging_policy : Policy
    delta : float, default=1.0
    draws : int, default=100
    random_state : int, default=0
    threads : int, default=1
    chain : bool, default=True
        Recover an unidentified pair by composing effects through other actions.
    n_actions : int or None
        Number of actions; inferred from the logging policy when omitted.

    Attributes
    ----------
    aps_ : ApsTable
    effects_ : EffectResolution
    coef_ : ndarray of shape (m - 1,)
        ``beta_hat(a, 1)`` for ``a = 2..m``; NaN when unidentified.
    """

    def __init__(self, logging_policy=None, delta=1.0, draws=DEFAULT_DRAWS, random_state=0, threads=1, chain=True, n_actions=None):
        self.logging_policy = logging_policy
        self.delta = delta
        self.draws = draws
        self.random_state = random_state
        self.threads = threads
        self.chain = chain
        self.n_actions = n_actions

    def _dataset(self, X, actions, y) -> LogDataset:
        X = _check_contexts(X, self)
        actions = np.asarray(actions)
        y = check_array(np.asarray(y, dtype=float).reshape(-1, 1), dtype=float).ravel()
        if actions.shape[0] != X.shape[0] or y.shape[0] != X.shape[0]:
            raise DataError("X, actions and y must have the same number of rows")
        m = self.n_actions or self.logging_policy.m
        if np.any((actions < 1) | (actions > m)) or np.any(actions != np.round(actions)):
            raise UnknownAction(f"actions must be integers in 1..{m}")
        return LogDataset(ContextMatrix(X), actions.astype(np.int64), y, int(m))

    def fit(self, X, actions, y):
        """Simulate APS for the logs and fit every ``beta(a, 1)``."""
        _check_policy(self.logging_policy, "logging_policy")
        data = self._dataset(X, actions, y)
        self.scaler_ = ContextScaler().fit(X)
        normed = data.with_contexts(self.scaler_.to_context_matrix(X))
        self.aps_ = compute_aps(normed, self.logging_policy, self.delta, self.draws, RngPlan(int(self.random_state)), self.threads)
        self.effects_ = resolve_effects(normed, self.aps_, chain=self.chain)
        self.coef_ = np.array([self.effects_.fits[a].beta_hat if a in self.effects_.fits else np.nan for a in range(2, data.m + 1)])
        self.dataset_ = data
        self.n_features_in_ = X.shape[1] if hasattr(X, "shape") else data.contexts.p_c
        return self

    def evaluate(self, target_policy):
        """``ValueEstimate`` of ``target_policy`` on the fitted logs."""
        check_is_fitted(self, "effects_")
        _check_policy(target_policy, "target_policy")
        return estimate_value(self.dataset_, self.logging_policy, target_policy, self.effects_, self.aps_)

    def score(self, target_policy, y=None) -> float:
        """Estimated value of ``target_policy``."""
        return self.evaluate(target_policy).v_hat


__all__ = ["ContextScaler", "ApsTransformer", "ApsOffPolicyEvaluator"]
