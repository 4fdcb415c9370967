"""Off-policy value estimation with APS controls.

For each action ``a`` the effect ``beta(a, 1)`` is estimated by least squares
of reward on an intercept, the treatment dummy ``1{A = a}`` and the pairwise
share ``q(a)``, using only records with ``A in {1, a}`` and ``q`` strictly
inside (0, 1). The value of a target policy is then the mean logged reward
plus each effect times the average probability shift toward that action.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.linalg import solve_triangular

from .aps import ApsTable, pairwise_share
from .core import LogDataset
from .exceptions import (
    DenominatorNearZero,
    DimensionMismatch,
    EmptyCell,
    FullCollinearity,
    MissingFit,
    RankDeficient,
    SubsampleTooSmall,
)
from .policy import Policy

COLLINEARITY_TOL = 1e-10


@dataclass(frozen=True)
class PairwiseFit:
    """Coefficients of one ``a`` versus ``baseline`` regression.

    ``path`` is set when the effect was composed along a chain of pairs; the
    coefficients other than ``beta_hat`` are then NaN and ``se_beta_robust``
    combines the links in quadrature.
    """

    action: int
    alpha_hat: float
    beta_hat: float
    gamma_hat: float
    n_sub: int
    se_beta_robust: float
    collinearity_flag: bool = False
    baseline: int = 1
    path: tuple = ()

    @property
    def chained(self) -> bool:
        return len(self.path) > 2

    def to_dict(self) -> dict:
        return {
            "a": self.action,
            "baseline": self.baseline,
            "alpha": _json_float(self.alpha_hat),
            "beta": _json_float(self.beta_hat),
            "gamma": _json_float(self.gamma_hat),
            "se": _json_float(self.se_beta_robust),
            "n_sub": self.n_sub,
            "flags": {"collinearity": self.collinearity_flag, "chained": self.chained},
            "path": list(self.path) if self.path else [self.baseline, self.action],
        }


def _json_float(x):
    return None if x is None or not math.isfinite(x) else float(x)


def _outcome(dataset: LogDataset, outcome) -> np.ndarray:
    if outcome is None:
        return dataset.rewards
    if isinstance(outcome, str):
        if outcome == dataset.reward_name:
            return dataset.rewards
        return dataset.extra_rewards[outcome]
    return np.asarray(outcome, dtype=float)


def select_subsample(dataset: LogDataset, aps: ApsTable, a: int, baseline: int = 1) -> np.ndarray:
    """Indices with ``A in {baseline, a}`` and pairwise share strictly in (0, 1)."""
    q = aps.q(a, baseline)
    with np.errstate(invalid="ignore"):
        inside = (q > 0) & (q < 1)
    arm = (dataset.actions == a) | (dataset.actions == baseline)
    return np.flatnonzero(arm & inside)


def _hc0_solve(Z, y):
    Q, R = np.linalg.qr(Z)
    theta = solve_triangular(R, Q.T @ y)
    resid = y - Z @ theta
    Rinv = solve_triangular(R, np.eye(R.shape[0]))
    bread = Rinv @ Rinv.T
    meat = (Z * (resid**2)[:, None]).T @ Z
    cov = bread @ meat @ bread
    return theta, cov


def _ill_conditioned(Z, tol=COLLINEARITY_TOL) -> bool:
    s = np.linalg.svd(Z, compute_uv=False)
    return not s[0] > 0 or s[-1] < tol * s[0]


def fit_pairwise(
    dataset: LogDataset,
    aps: ApsTable,
    a: int,
    baseline: int = 1,
    outcome=None,
    min_size: int = 3,
) -> PairwiseFit:
    """Least-squares fit of ``Y ~ 1 + 1{A = a} + q`` on the overlap subsample.

    Standard errors are HC0. When the design is numerically singular (``q``
    constant on the subsample) the intercept is dropped and
    ``collinearity_flag`` is set.
    """
    idx = select_subsample(dataset, aps, a, baseline)
    if idx.size < min_size:
        raise SubsampleTooSmall(f"pair ({a}, {baseline}) has {idx.size} overlapping records; need {min_size}")
    y = _outcome(dataset, outcome)[idx]
    d = (dataset.actions[idx] == a).astype(float)
    if d.min() == d.max():
        raise FullCollinearity(f"pair ({a}, {baseline}) subsample contains only action {int(dataset.actions[idx[0]])}")
    q = aps.q(a, baseline)[idx]
    Z = np.column_stack([np.ones_like(d), d, q])
    flag = _ill_conditioned(Z)
    if flag:
        Z = Z[:, 1:]
        if _ill_conditioned(Z):
            raise FullCollinearity(f"pair ({a}, {baseline}) design is singular even without intercept")
    theta, cov = _hc0_solve(Z, y)
    if flag:
        alpha, beta, gamma, se = 0.0, theta[0], theta[1], cov[0, 0]
    else:
        alpha, beta, gamma, se = theta[0], theta[1], theta[2], cov[1, 1]
    return PairwiseFit(
        action=int(a),
        alpha_hat=float(alpha),
        beta_hat=float(beta),
        gamma_hat=float(gamma),
        n_sub=int(idx.size),
        se_beta_robust=float(math.sqrt(max(se, 0.0))),
        collinearity_flag=bool(flag),
        baseline=int(baseline),
    )


@dataclass
class EffectResolution:
    """Effects ``beta(a, 1)`` for every identifiable action plus a failure log."""

    fits: Dict[int, PairwiseFit]
    failures: Dict[int, str] = field(default_factory=dict)
    attempts: list = field(default_factory=list)

    def union_size(self, dataset: LogDataset, aps: ApsTable) -> int:
        used = set()
        for fit in self.fits.values():
            nodes = fit.path or (fit.baseline, fit.action)
            for u, v in zip(nodes[:-1], nodes[1:]):
                lo, hi = min(u, v), max(u, v)
                used.update(select_subsample(dataset, aps, hi, lo).tolist())
        return len(used)


def resolve_effects(
    dataset: LogDataset,
    aps: ApsTable,
    actions: Optional[Sequence[int]] = None,
    outcome=None,
    chain: bool = True,
) -> EffectResolution:
    """Fit ``beta(a, 1)`` directly, composing through other actions if needed.

    A failed direct pair is recovered by summing effects along the shortest
    path of estimable pairs from action 1 to ``a``; ties go to the path through
    the smallest intermediate action.
    """
    targets = list(range(2, dataset.m + 1)) if actions is None else [int(a) for a in actions]
    res = EffectResolution(fits={})
    for a in targets:
        try:
            res.fits[a] = fit_pairwise(dataset, aps, a, outcome=outcome)
            res.attempts.append({"pair": [1, a], "ok": True})
        except (SubsampleTooSmall, FullCollinearity) as exc:
            res.failures[a] = str(exc)
            res.attempts.append({"pair": [1, a], "ok": False, "reason": str(exc)})
    if not chain or not res.failures:
        return res

    edges: Dict[tuple, PairwiseFit] = {}
    for u in range(1, dataset.m + 1):
        for v in range(u + 1, dataset.m + 1):
            if u == 1 and v in res.fits:
                edges[(u, v)] = res.fits[v]
                continue
            if u == 1:
                continue
            try:
                edges[(u, v)] = fit_pairwise(dataset, aps, v, baseline=u, outcome=outcome)
                res.attempts.append({"pair": [u, v], "ok": True})
            except (SubsampleTooSmall, FullCollinearity) as exc:
                res.attempts.append({"pair": [u, v], "ok": False, "reason": str(exc)})

    parent = {1: None}
    queue = deque([1])
    while queue:
        u = queue.popleft()
        for v in range(1, dataset.m + 1):
            if v not in parent and (min(u, v), max(u, v)) in edges:
                parent[v] = u
                queue.append(v)

    for a in list(res.failures):
        if a not in parent:
            res.failures[a] += "; no chain of overlapping pairs reaches action 1"
            continue
        path = [a]
        while parent[path[-1]] is not None:
            path.append(parent[path[-1]])
        path.reverse()
        beta, var, n_sub = 0.0, 0.0, 0
        for u, v in zip(path[:-1], path[1:]):
            link = edges[(min(u, v), max(u, v))]
            sign = 1.0 if v > u else -1.0
            beta += sign * link.beta_hat
            var += link.se_beta_robust**2
            n_sub += link.n_sub
        res.fits[a] = PairwiseFit(
            action=a,
            alpha_hat=float("nan"),
            beta_hat=beta,
            gamma_hat=float("nan"),
            n_sub=n_sub,
            se_beta_robust=math.sqrt(var),
            path=tuple(path),
        )
        del res.failures[a]
    return res


@dataclass(frozen=True)
class ValueEstimate:
    """Estimated value of a target policy and the effects behind it."""

    v_hat: float
    per_pair: tuple
    mean_logged_reward: float
    shift_terms: Mapping[int, float]
    delta: Optional[float] = None
    draws: Optional[int] = None
    seed: Optional[int] = None

    def reconstruct(self) -> float:
        betas = {f.action: f.beta_hat for f in self.per_pair}
        return self.mean_logged_reward + sum(betas[a] * s for a, s in self.shift_terms.items() if s != 0.0)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "v_hat": _json_float(self.v_hat),
            "mean_logged_reward": _json_float(self.mean_logged_reward),
            "per_pair": [f.to_dict() for f in self.per_pair],
            "shift_terms": {str(a): float(s) for a, s in self.shift_terms.items()},
            "delta": self.delta,
            "draws": self.draws,
            "seed": self.seed,
        }


def policy_shift(dataset: LogDataset, policy_ml: Policy, policy_pi: Policy) -> np.ndarray:
    """Per-record ``pi(a|X_i) - ML(a|X_i)`` of shape ``(n, m)``."""
    for pol in (policy_ml, policy_pi):
        if pol.m != dataset.m:
            raise DimensionMismatch(f"policy has {pol.m} actions; data has {dataset.m}")
    inputs = dataset.contexts.policy_inputs()
    return policy_pi.evaluate(inputs) - policy_ml.evaluate(inputs)


def value_from_effects(dataset: LogDataset, shift: np.ndarray, betas: Mapping[int, float]):
    """Plug-in value ``mean(Y) + sum_a beta_a * mean_i shift[i, a]``.

    Actions whose shift is identically zero need no effect. Returns the value,
    the mean reward and the shift terms for ``a = 2..m``.
    """
    mean_y = float(np.mean(dataset.rewards))
    terms = {a: float(np.mean(shift[:, a - 1])) for a in range(2, dataset.m + 1)}
    needed = [a for a in terms if np.any(shift[:, a - 1] != 0)]
    missing = [a for a in needed if a not in betas or not math.isfinite(betas[a])]
    if missing:
        raise MissingFit(f"effects beta(a, 1) are unidentified for actions {missing}")
    v = mean_y
    for a in needed:
        v += betas[a] * terms[a]
    return v, mean_y, terms


def estimate_value(
    dataset: LogDataset,
    policy_ml: Policy,
    policy_pi: Policy,
    fits,
    aps: Optional[ApsTable] = None,
) -> ValueEstimate:
    """Plug the fitted effects into the value formula for ``policy_pi``."""
    if isinstance(fits, EffectResolution):
        fits = fits.fits
    if not isinstance(fits, Mapping):
        fits = {f.action: f for f in fits}
    shift = policy_shift(dataset, policy_ml, policy_pi)
    v, mean_y, terms = value_from_effects(dataset, shift, {a: f.beta_hat for a, f in fits.items()})
    return ValueEstimate(
        v_hat=v,
        per_pair=tuple(fits[a] for a in sorted(fits)),
        mean_logged_reward=mean_y,
        shift_terms=terms,
        delta=None if aps is None else aps.delta,
        draws=None if aps is None else aps.draws,
        seed=None if aps is None else aps.seed,
    )


# ------------------------------------------------------------------ baselines


def baseline_mean_difference(
    dataset: LogDataset,
    a: int,
    restrict: str = "all",
    policy_ml: Optional[Policy] = None,
    outcome=None,
) -> float:
    """``mean(Y | A = a) - mean(Y | A = 1)``, optionally on the full-support region.

    ``restrict="full_support_region"`` keeps records where ``policy_ml`` gives
    every action positive probability.
    """
    y = _outcome(dataset, outcome)
    keep = np.ones(dataset.n, dtype=bool)
    if restrict == "full_support_region":
        if policy_ml is None:
            raise ValueError("full_support_region needs the logging policy")
        keep = np.all(policy_ml.evaluate(dataset.contexts.policy_inputs()) > 0, axis=1)
    elif restrict != "all":
        raise ValueError(f"unknown restriction {restrict!r}")
    treated = keep & (dataset.actions == a)
    base = keep & (dataset.actions == 1)
    if not treated.any() or not base.any():
        raise EmptyCell(f"no records for action {a if not treated.any() else 1} in the {restrict} restriction")
    return float(y[treated].mean() - y[base].mean())


def fit_direct_method(dataset: LogDataset, outcome=None) -> np.ndarray:
    """Action effects from ``Y ~ 1 + sum_{a>=2} 1{A = a} + X``; entry 0 is action 1 (zero)."""
    y = _outcome(dataset, outcome)
    X = dataset.contexts.policy_inputs()
    dummies = (dataset.actions[:, None] == np.arange(2, dataset.m + 1)[None, :]).astype(float)
    Z = np.hstack([np.ones((dataset.n, 1)), dummies, X])
    if Z.shape[0] < Z.shape[1] or _ill_conditioned(Z):
        raise RankDeficient("direct-method design matrix is rank deficient")
    Q, R = np.linalg.qr(Z)
    theta = solve_triangular(R, Q.T @ y)
    return np.concatenate([[0.0], theta[1 : dataset.m]])


def baseline_direct_method(dataset: LogDataset, policy_pi: Policy, outcome=None) -> float:
    """Direct-method value: average ``mu_i(a) = Y_i + beta_a - beta_{A_i}`` under ``policy_pi``."""
    y = _outcome(dataset, outcome)
    betas = fit_direct_method(dataset, outcome)
    pi = policy_pi.evaluate(dataset.contexts.policy_inputs())
    mu = y[:, None] + betas[None, :] - betas[dataset.actions - 1][:, None]
    return float(np.mean(np.sum(mu * pi, axis=1)))


def effect_ratio(fit_num: Union[PairwiseFit, float], fit_den: Union[PairwiseFit, float], eps: float = 1e-10) -> float:
    """Ratio of two effects, e.g. spend uplift per unit of coupon cost."""
    num = fit_num.beta_hat if isinstance(fit_num, PairwiseFit) else float(fit_num)
    den = fit_den.beta_hat if isinstance(fit_den, PairwiseFit) else float(fit_den)
    if not abs(den) > eps:
        raise DenominatorNearZero(f"denominator effect {den!r} is within {eps} of zero")
    return num / den


__all__ = [
    "PairwiseFit",
    "ValueEstimate",
    "EffectResolution",
    "select_subsample",
    "fit_pairwise",
    "resolve_effects",
    "estimate_value",
    "policy_shift",
    "value_from_effects",
    "baseline_mean_difference",
    "fit_direct_method",
    "baseline_direct_method",
    "effect_ratio",
    "pairwise_share",
]
