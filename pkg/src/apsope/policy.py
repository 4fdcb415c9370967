"""Declarative policies mapping a context row to a distribution over actions.

Every policy reads the context only through a linear feature map ``W`` (one
row per feature) and turns those features into an ``m``-vector of action
probabilities. ``evaluate(x)`` is ``from_features(x @ W.T)``. Exposing ``W``
lets the APS sampler draw only the part of a ball point the policy can see.

Context rows are in raw units: continuous columns first, then any discrete
columns. Actions are coded ``1..m``; column ``k`` of a probability vector
belongs to action ``k + 1``. Argmax ties go to the lowest action index.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular

from .core import LogDataset
from .exceptions import (
    ConfigError,
    DegenerateDeciles,
    DimensionMismatch,
    RankDeficient,
)

_PROB_TOL = 1e-12


def _one_hot(idx, m):
    out = np.zeros((idx.shape[0], m))
    out[np.arange(idx.shape[0]), idx] = 1.0
    return out


def _ro(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


class Policy:
    """Base class; subclasses are frozen dataclasses."""

    m: int
    n_inputs: Optional[int]
    deterministic = False

    def feature_map(self) -> np.ndarray:
        raise NotImplementedError

    def from_features(self, F: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def n_features(self) -> int:
        return self.feature_map().shape[0]

    def evaluate(self, x) -> np.ndarray:
        """Action probabilities at one row (returns ``(m,)``) or many (``(N, m)``)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        if X.ndim != 2:
            raise DimensionMismatch(f"context must be 1-d or 2-d, got shape {x.shape}")
        if self.n_inputs is not None and X.shape[1] != self.n_inputs:
            raise DimensionMismatch(f"policy expects {self.n_inputs} inputs, got {X.shape[1]}")
        W = self.feature_map()
        F = X @ W.T if W.shape[0] else np.zeros((X.shape[0], 0))
        probs = self.from_features(F)
        return probs[0] if single else probs

    def to_dict(self) -> dict:
        raise NotImplementedError

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _child_map(policy, n_in):
    W = policy.feature_map()
    return W if W.shape[0] else np.zeros((0, n_in))


def _check_inputs(policy, n_inputs):
    if n_inputs is not None and policy.n_inputs is not None and n_inputs != policy.n_inputs:
        raise DimensionMismatch("child policies disagree on input dimension")


@dataclass(frozen=True)
class Uniform(Policy):
    m: int
    n_inputs: Optional[int] = None

    def feature_map(self):
        return np.zeros((0, self.n_inputs or 0))

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        if self.n_inputs is not None and x.shape[-1] != self.n_inputs:
            raise DimensionMismatch(f"policy expects {self.n_inputs} inputs, got {x.shape[-1]}")
        if x.ndim == 1:
            return np.full(self.m, 1.0 / self.m)
        return np.full((x.shape[0], self.m), 1.0 / self.m)

    def from_features(self, F):
        return np.full((F.shape[0], self.m), 1.0 / self.m)

    def to_dict(self):
        return {"type": "uniform", "m": self.m, "n_inputs": self.n_inputs}


@dataclass(frozen=True)
class LinearGreedy(Policy):
    """Deterministic ``argmax_a intercepts[a] + coefs[a] . x``."""

    intercepts: np.ndarray
    coefs: np.ndarray
    deterministic = True

    def __post_init__(self):
        b = _ro(self.intercepts)
        C = _ro(np.atleast_2d(self.coefs))
        if b.ndim != 1 or C.shape[0] != b.shape[0]:
            raise ConfigError("intercepts and coefs disagree on the number of actions")
        object.__setattr__(self, "intercepts", b)
        object.__setattr__(self, "coefs", C)

    @property
    def m(self):
        return self.intercepts.shape[0]

    @property
    def n_inputs(self):
        return self.coefs.shape[1]

    def scores(self, X):
        return np.atleast_2d(X) @ self.coefs.T + self.intercepts

    def feature_map(self):
        return self.coefs

    def from_features(self, F):
        return _one_hot(np.argmax(F + self.intercepts, axis=1), self.m)

    def to_dict(self):
        return {
            "type": "linear_greedy",
            "intercepts": self.intercepts.tolist(),
            "coefs": self.coefs.tolist(),
        }


@dataclass(frozen=True)
class QuantileGate(Policy):
    """``inside`` where ``x[feature] >= threshold``, ``outside`` elsewhere."""

    feature: int
    threshold: float
    inside: Policy
    outside: Policy

    def __post_init__(self):
        if self.inside.m != self.outside.m:
            raise ConfigError("gate children must share the action count")
        _check_inputs(self.inside, self.outside.n_inputs)

    @property
    def m(self):
        return self.inside.m

    @property
    def n_inputs(self):
        return self.outside.n_inputs if self.outside.n_inputs is not None else self.inside.n_inputs

    @property
    def deterministic(self):
        return self.inside.deterministic and self.outside.deterministic

    def feature_map(self):
        n_in = self.n_inputs
        if n_in is None:
            n_in = self.feature + 1
        gate = np.zeros((1, n_in))
        gate[0, self.feature] = 1.0
        return np.vstack([gate, _child_map(self.inside, n_in), _child_map(self.outside, n_in)])

    def from_features(self, F):
        k_in = self.inside.n_features()
        gate = F[:, 0] >= self.threshold
        F_in = F[:, 1 : 1 + k_in]
        F_out = F[:, 1 + k_in :]
        return np.where(gate[:, None], self.inside.from_features(F_in), self.outside.from_features(F_out))

    def to_dict(self):
        return {
            "type": "quantile_gate",
            "feature": self.feature,
            "threshold": self.threshold,
            "inside": self.inside.to_dict(),
            "outside": self.outside.to_dict(),
        }


@dataclass(frozen=True)
class ScoreThreshold(Policy):
    """Binary policy choosing action 2 when ``bias + weights . x >= threshold``."""

    weights: np.ndarray
    threshold: float
    bias: float = 0.0
    deterministic = True
    m = 2

    def __post_init__(self):
        object.__setattr__(self, "weights", _ro(np.ravel(self.weights)))

    @property
    def n_inputs(self):
        return self.weights.shape[0]

    def score(self, X):
        return np.atleast_2d(X) @ self.weights + self.bias

    def feature_map(self):
        return self.weights[None, :]

    def from_features(self, F):
        treat = (F[:, 0] + self.bias >= self.threshold).astype(float)
        return np.column_stack([1.0 - treat, treat])

    def to_dict(self):
        return {
            "type": "score_threshold",
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "threshold": self.threshold,
        }


@dataclass(frozen=True)
class TableLookup(Policy):
    """First matching axis-aligned region wins; ``default`` applies elsewhere.

    Each rule is ``(bounds, probs)`` where ``bounds`` maps an input column to
    ``(lo, hi)`` and a row matches when ``lo <= x[j] < hi`` for every entry.
    """

    rules: tuple
    default: np.ndarray
    n_inputs: int

    def __post_init__(self):
        default = _ro(self.default)
        rules = []
        for bounds, probs in self.rules:
            probs = _ro(probs)
            if probs.shape != default.shape:
                raise ConfigError("every rule needs one probability per action")
            bounds = {int(j): (float(lo), float(hi)) for j, (lo, hi) in dict(bounds).items()}
            rules.append((bounds, probs))
        for probs in [default] + [p for _, p in rules]:
            if np.any(probs < 0) or np.any(probs > 1) or abs(probs.sum() - 1.0) > _PROB_TOL:
                raise ConfigError("rule probabilities must form a distribution")
        object.__setattr__(self, "default", default)
        object.__setattr__(self, "rules", tuple(rules))

    @property
    def m(self):
        return self.default.shape[0]

    @property
    def deterministic(self):
        return all(np.isin(p, (0.0, 1.0)).all() for p in [self.default] + [p for _, p in self.rules])

    def _columns(self):
        return sorted({j for bounds, _ in self.rules for j in bounds})

    def feature_map(self):
        cols = self._columns()
        W = np.zeros((len(cols), self.n_inputs))
        W[np.arange(len(cols)), cols] = 1.0
        return W

    def from_features(self, F):
        pos = {j: k for k, j in enumerate(self._columns())}
        out = np.tile(self.default, (F.shape[0], 1))
        done = np.zeros(F.shape[0], dtype=bool)
        for bounds, probs in self.rules:
            hit = ~done
            for j, (lo, hi) in bounds.items():
                col = F[:, pos[j]]
                hit &= (col >= lo) & (col < hi)
            out[hit] = probs
            done |= hit
        return out

    def to_dict(self):
        return {
            "type": "table_lookup",
            "n_inputs": self.n_inputs,
            "default": self.default.tolist(),
            "rules": [
                {"bounds": {str(j): list(b) for j, b in bounds.items()}, "probs": probs.tolist()}
                for bounds, probs in self.rules
            ],
        }


@dataclass(frozen=True)
class UcbTable(Policy):
    """Greedy policy over a decile grid of two features.

    ``UCB(x, a) = Q[a, d1, d2] + c * sqrt(log(n_train) / N[a, d1, d2])``
    where ``d1``/``d2`` are the decile bins of the two features. Bins are
    right-closed and values beyond the cut points fall into the end bins. An
    empty cell has an infinite bonus.
    """

    features: tuple
    cuts1: np.ndarray
    cuts2: np.ndarray
    q_values: np.ndarray
    counts: np.ndarray
    c: float
    n_train: int
    n_inputs: int
    deterministic = True
    _best: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(int(j) for j in self.features))
        object.__setattr__(self, "cuts1", _ro(self.cuts1))
        object.__setattr__(self, "cuts2", _ro(self.cuts2))
        object.__setattr__(self, "q_values", _ro(self.q_values))
        object.__setattr__(self, "counts", _ro(self.counts, dtype=np.int64))
        shape = (self.q_values.shape[0], self.cuts1.shape[0] + 1, self.cuts2.shape[0] + 1)
        if self.q_values.shape != shape or self.counts.shape != shape:
            raise ConfigError(f"q_values/counts must have shape {shape}")
        best = np.argmax(self.cell_ucb(), axis=0)
        best.setflags(write=False)
        object.__setattr__(self, "_best", best)

    @property
    def m(self):
        return self.q_values.shape[0]

    def cell_ucb(self) -> np.ndarray:
        """UCB value of every (action, d1, d2) cell."""
        with np.errstate(divide="ignore", invalid="ignore"):
            bonus = self.c * np.sqrt(math.log(self.n_train) / self.counts)
            ucb = np.where(self.counts > 0, self.q_values + bonus, np.inf)
        return ucb

    def bins(self, x1, x2):
        d1 = np.searchsorted(self.cuts1, x1, side="left")
        d2 = np.searchsorted(self.cuts2, x2, side="left")
        return d1, d2

    def ucb_values(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        d1, d2 = self.bins(X[:, self.features[0]], X[:, self.features[1]])
        return self.cell_ucb()[:, d1, d2].T

    def feature_map(self):
        W = np.zeros((2, self.n_inputs))
        W[0, self.features[0]] = 1.0
        W[1, self.features[1]] = 1.0
        return W

    def from_features(self, F):
        d1, d2 = self.bins(F[:, 0], F[:, 1])
        return _one_hot(self._best[d1, d2], self.m)

    def to_dict(self):
        return {
            "type": "ucb_table",
            "features": list(self.features),
            "cuts1": self.cuts1.tolist(),
            "cuts2": self.cuts2.tolist(),
            "q_values": np.where(self.counts > 0, self.q_values, 0.0).tolist(),
            "counts": self.counts.tolist(),
            "c": self.c,
            "n_train": self.n_train,
            "n_inputs": self.n_inputs,
        }


# ------------------------------------------------------------------ (de)serialize


def policy_from_dict(d) -> Policy:
    try:
        kind = d["type"]
        if kind == "uniform":
            return Uniform(int(d["m"]), d.get("n_inputs"))
        if kind == "linear_greedy":
            return LinearGreedy(np.array(d["intercepts"], float), np.array(d["coefs"], float))
        if kind == "quantile_gate":
            return QuantileGate(
                int(d["feature"]),
                float(d["threshold"]),
                policy_from_dict(d["inside"]),
                policy_from_dict(d["outside"]),
            )
        if kind == "score_threshold":
            return ScoreThreshold(np.array(d["weights"], float), float(d["threshold"]), float(d.get("bias", 0.0)))
        if kind == "table_lookup":
            rules = tuple(
                ({int(j): tuple(b) for j, b in r["bounds"].items()}, np.array(r["probs"], float))
                for r in d.get("rules", [])
            )
            return TableLookup(rules, np.array(d["default"], float), int(d["n_inputs"]))
        if kind == "ucb_table":
            return UcbTable(
                features=tuple(d["features"]),
                cuts1=np.array(d["cuts1"], float),
                cuts2=np.array(d["cuts2"], float),
                q_values=np.array(d["q_values"], float),
                counts=np.array(d["counts"], np.int64),
                c=float(d["c"]),
                n_train=int(d["n_train"]),
                n_inputs=int(d["n_inputs"]),
            )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"malformed policy document: {exc}") from None
    raise ConfigError(f"unknown policy type {d.get('type')!r}", field="type")


def load_policy(path) -> Policy:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return policy_from_dict(doc)


def save_policy(policy: Policy, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(policy.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ------------------------------------------------------------------ training


@dataclass(frozen=True)
class PredictionModel:
    """Per-action linear reward predictions ``intercepts[a] + coefs[a] . x``."""

    intercepts: np.ndarray
    coefs: np.ndarray
    rank_deficient: bool = False

    def predict(self, X) -> np.ndarray:
        return np.atleast_2d(X) @ self.coefs.T + self.intercepts

    def greedy_policy(self, n_inputs: Optional[int] = None) -> LinearGreedy:
        C = self.coefs
        if n_inputs is not None and n_inputs > C.shape[1]:
            C = np.hstack([C, np.zeros((C.shape[0], n_inputs - C.shape[1]))])
        return LinearGreedy(self.intercepts, C)


def _ols(Z, y, rcond=1e-10):
    """Least squares via QR; falls back to the pseudo-inverse when singular."""
    s = np.linalg.svd(Z, compute_uv=False)
    if s[-1] <= rcond * s[0]:
        return np.linalg.pinv(Z, rcond=rcond) @ y, True
    Q, R = np.linalg.qr(Z)
    return solve_triangular(R, Q.T @ y), False


def fit_linear_reward_model(train: LogDataset) -> PredictionModel:
    """Regress reward on a per-action intercept and per-action slopes.

    Equivalent to the fully interacted regression
    ``Y = sum_a (b_a + x . c_a) 1{A = a} + e``, solved one action at a time.
    Uses raw continuous columns.
    """
    X = train.contexts.raw_values()
    p_c = X.shape[1]
    b = np.empty(train.m)
    C = np.empty((train.m, p_c))
    flagged = False
    for a in range(1, train.m + 1):
        rows = train.actions == a
        if rows.sum() < p_c + 1:
            raise RankDeficient(f"action {a} has {int(rows.sum())} records; need at least {p_c + 1}")
        Z = np.hstack([np.ones((int(rows.sum()), 1)), X[rows]])
        theta, singular = _ols(Z, train.rewards[rows])
        if singular:
            flagged = True
            warnings.warn(f"design for action {a} is singular; used pseudo-inverse", RuntimeWarning, stacklevel=2)
        b[a - 1] = theta[0]
        C[a - 1] = theta[1:]
    return PredictionModel(_ro(b), _ro(C), rank_deficient=flagged)


def decile_cuts(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.unique(x).size < 10:
        raise DegenerateDeciles("need at least 10 distinct values to form deciles")
    return np.quantile(x, np.arange(1, 10) / 10.0)


def train_ucb(train: LogDataset, c: float = 2.0, feature_pair=(0, 1)) -> UcbTable:
    """Cell means and counts on the decile grid of two continuous features."""
    X = train.contexts.raw_values()
    j1, j2 = (int(j) for j in feature_pair)
    cuts1, cuts2 = decile_cuts(X[:, j1]), decile_cuts(X[:, j2])
    d1 = np.searchsorted(cuts1, X[:, j1], side="left")
    d2 = np.searchsorted(cuts2, X[:, j2], side="left")
    shape = (train.m, 10, 10)
    counts = np.zeros(shape, dtype=np.int64)
    sums = np.zeros(shape)
    np.add.at(counts, (train.actions - 1, d1, d2), 1)
    np.add.at(sums, (train.actions - 1, d1, d2), train.rewards)
    with np.errstate(invalid="ignore", divide="ignore"):
        q = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    return UcbTable(
        features=(j1, j2),
        cuts1=cuts1,
        cuts2=cuts2,
        q_values=q,
        counts=counts,
        c=float(c),
        n_train=train.n,
        n_inputs=train.contexts.p_c + train.contexts.p_d,
    )
