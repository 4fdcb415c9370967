"""Monte Carlo experiments with known ground truth.

Two logging regimes are simulated on 100 correlated Gaussian contexts and five
actions:

* ``exp1``: records with ``x1`` at or above its 99th percentile get a uniform
  A/B assignment; everyone else gets the greedy action of a linear reward
  model trained on an independent A/B sample. The target policy has the same
  shape, gated on ``x2`` and using a second model fitted on a fresh action
  draw.
* ``exp2``: the logging policy is a UCB table over the decile grid of
  ``x1``/``x2``; the target policy is greedy on a linear reward model.

Rewards are quadratic in the contexts. In ``constant`` mode the action effect
is ``a - 1`` everywhere; in ``nonconstant`` mode each action adds its own
quadratic term.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .aps import compute_aps
from .core import ContextMatrix, LogDataset, RngPlan, normalize_contexts
from .exceptions import ApsError, ConfigError
from .estimator import (
    baseline_direct_method,
    baseline_mean_difference,
    estimate_value,
    policy_shift,
    resolve_effects,
    value_from_effects,
)
from .policy import (
    PredictionModel,
    QuantileGate,
    Uniform,
    UcbTable,
    fit_linear_reward_model,
    train_ucb,
)

log = logging.getLogger(__name__)

SIGMA_ROWS = (2, 3, 4, 5, 6)
SIGMA_COLS = (35, 66, 78)
EXPERIMENTS = ("exp1", "exp2")
EFFECT_MODES = ("constant", "nonconstant")
ESTIMATORS = ("aps", "md_ab", "md_full", "direct")
DEFAULT_ESTIMATORS = {"exp1": ("aps", "md_ab", "md_full"), "exp2": ("aps", "direct")}
DEFAULT_DELTAS = (0.1, 0.5, 1.0, 2.5)


@dataclass(frozen=True)
class DgpSpec:
    experiment: str = "exp1"
    effect_mode: str = "constant"
    n: int = 10_000
    p: int = 100
    m: int = 5
    seed: int = 0
    n_train: int = 10_000
    ucb_c: float = 2.0
    draws: int = 100
    truth_draws: int = 1_000_000
    gate_quantile: float = 0.99

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}", field="experiment")
        if self.effect_mode not in EFFECT_MODES:
            raise ConfigError(f"effect_mode must be one of {EFFECT_MODES}", field="effect_mode")
        if self.p < max(SIGMA_COLS):
            raise ConfigError(f"p must be at least {max(SIGMA_COLS)}", field="p")
        if self.n < 10 or self.n_train < 10:
            raise ConfigError("sample sizes must be at least 10", field="n")
        if self.draws < 1:
            raise ConfigError("draws must be at least 1", field="draws")


# ------------------------------------------------------------------ parameters


def build_v(seed, p: int = 100) -> np.ndarray:
    """Symmetric matrix with unit diagonal and uniform(-0.5, 0.5) entries on a fixed pattern."""
    rng = RngPlan(int(seed)).stream_for(0, "sigma")
    V = np.eye(p)
    for i in SIGMA_ROWS:
        for j in SIGMA_COLS:
            V[i - 1, j - 1] = V[j - 1, i - 1] = rng.uniform(-0.5, 0.5)
    return V


def build_sigma(seed, p: int = 100) -> np.ndarray:
    """Context covariance ``V @ V``."""
    V = build_v(seed, p)
    return V @ V


@dataclass(frozen=True)
class Alphas:
    alpha0: np.ndarray
    alpha: np.ndarray
    raw_alpha0: np.ndarray
    raw_alpha: np.ndarray


def index_variance(alpha, sigma) -> float:
    """``Var(X . alpha)`` for ``X ~ N(0, sigma)``."""
    return float(alpha @ sigma @ alpha)


def draw_alphas(seed, sigma: np.ndarray, m: int = 5) -> Alphas:
    """Baseline and per-action coefficient vectors.

    The last half of the baseline vector is uniform(-100, 100), per-action
    vectors are uniform(-150, 200), and the first half of the baseline is the
    across-action mean. Each vector is then scaled so its linear index has
    unit variance under ``sigma``.
    """
    p = sigma.shape[0]
    half = p // 2
    rng = RngPlan(int(seed)).stream_for(0, "alphas")
    raw0 = np.empty(p)
    raw0[half:] = rng.uniform(-100, 100, size=p - half)
    raw = rng.uniform(-150, 200, size=(m, p))
    raw0[:half] = raw[:, :half].mean(axis=0)
    alpha0 = raw0 / math.sqrt(index_variance(raw0, sigma))
    alpha = np.vstack([r / math.sqrt(index_variance(r, sigma)) for r in raw])
    return Alphas(alpha0, alpha, raw0, raw)


# ------------------------------------------------------------------ study setup


@dataclass
class TrainingSample:
    dataset: LogDataset
    alt_dataset: LogDataset


def draw_contexts(V: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((n, V.shape[0])) @ V


def generate_training_sample(spec: DgpSpec, sigma=None, alphas=None) -> TrainingSample:
    """Past uniform A/B sample used to build the policies.

    Potential rewards are drawn once; the second dataset re-draws only the
    actions so that two independent reward models can be fitted.
    """
    V = build_v(spec.seed, spec.p)
    sigma = V @ V if sigma is None else sigma
    alphas = draw_alphas(spec.seed, sigma, spec.m) if alphas is None else alphas
    rng = RngPlan(spec.seed).stream_for(0, "training")
    X = draw_contexts(V, spec.n_train, rng)
    X2 = X * X
    u = rng.standard_normal(spec.n_train)
    eps = rng.standard_normal((spec.n_train, spec.m))
    potential = X2 @ (0.75 * alphas.alpha0[:, None] + 0.5 * alphas.alpha.T) + 0.25 * u[:, None] + 0.5 * eps
    rows = np.arange(spec.n_train)
    ctx = ContextMatrix(X)
    out = []
    for _ in range(2):
        A = rng.integers(0, spec.m, size=spec.n_train)
        out.append(LogDataset(ctx, A + 1, potential[rows, A], spec.m))
    return TrainingSample(*out)


def training_reward_mean(sigma: np.ndarray, alphas: Alphas) -> float:
    """Closed-form mean of the training reward under uniform actions."""
    diag = np.diag(sigma)
    return float(diag @ (0.75 * alphas.alpha0 + 0.5 * alphas.alpha.mean(axis=0)))


@dataclass
class Study:
    """Everything fixed across replications of one experiment."""

    spec: DgpSpec
    V: np.ndarray
    sigma: np.ndarray
    alphas: Alphas
    training: TrainingSample
    tau_ml: PredictionModel
    tau_pi: PredictionModel
    ucb: Optional[UcbTable]
    truth_gate: Optional[np.ndarray] = None
    truth_choice: Optional[np.ndarray] = None
    truth_effects: Optional[np.ndarray] = None
    truth_base: float = 0.0

    @classmethod
    def build(cls, spec: DgpSpec) -> "Study":
        V = build_v(spec.seed, spec.p)
        sigma = V @ V
        alphas = draw_alphas(spec.seed, sigma, spec.m)
        training = generate_training_sample(spec, sigma, alphas)
        tau_ml = fit_linear_reward_model(training.dataset)
        tau_pi = fit_linear_reward_model(training.alt_dataset)
        ucb = train_ucb(training.dataset, c=spec.ucb_c, feature_pair=(0, 1)) if spec.experiment == "exp2" else None
        study = cls(spec, V, sigma, alphas, training, tau_ml, tau_pi, ucb)
        study._build_truth()
        return study

    # target policy pieces -------------------------------------------------
    def target_scorer(self) -> PredictionModel:
        # exp1 uses the model fitted on the second action draw; exp2 uses the first
        return self.tau_pi if self.spec.experiment == "exp1" else self.tau_ml

    def logging_policy(self, X: np.ndarray):
        if self.spec.experiment == "exp2":
            return self.ucb
        t = float(np.quantile(X[:, 0], self.spec.gate_quantile))
        return QuantileGate(0, t, Uniform(self.spec.m), self.tau_ml.greedy_policy())

    def target_policy(self, X: np.ndarray):
        greedy = self.target_scorer().greedy_policy()
        if self.spec.experiment == "exp2":
            return greedy
        t = float(np.quantile(X[:, 1], self.spec.gate_quantile))
        return QuantileGate(1, t, Uniform(self.spec.m), greedy)

    # ground truth -----------------------------------------------------------
    def _build_truth(self, chunk: int = 50_000):
        spec = self.spec
        rng = RngPlan(spec.seed).stream_for(0, "truth")
        scorer = self.target_scorer()
        gates, choices, effects = [], [], []
        left = spec.truth_draws
        while left > 0:
            k = min(chunk, left)
            X = draw_contexts(self.V, k, rng)
            gates.append(X[:, 1].copy())
            choices.append(np.argmax(scorer.predict(X), axis=1).astype(np.int8))
            if spec.effect_mode == "nonconstant":
                effects.append((X * X) @ self.alphas.alpha.T)
            left -= k
        self.truth_gate = np.concatenate(gates)
        self.truth_choice = np.concatenate(choices)
        if effects:
            self.truth_effects = np.vstack(effects)
        diag = np.diag(self.sigma)
        self.truth_base = float(0.75 * diag @ self.alphas.alpha0)

    def true_value(self, target) -> float:
        """Value of the target policy using the fresh context sample for ``E[pi(a|X)]``."""
        m = self.spec.m
        if isinstance(target, QuantileGate):
            gate = self.truth_gate >= target.threshold
        else:
            gate = np.zeros(self.truth_choice.shape[0], dtype=bool)
        if self.spec.effect_mode == "constant":
            # E[Y(1)] = base + 1; effect of action a is a - 1
            per_draw = np.where(gate, (m - 1) / 2.0, self.truth_choice.astype(float))
            return self.truth_base + 1.0 + float(np.mean(per_draw))
        h = self.truth_effects
        chosen = h[np.arange(h.shape[0]), self.truth_choice]
        per_draw = np.where(gate, h.mean(axis=1), chosen)
        return self.truth_base + float(np.mean(per_draw))

    def effect_truth(self) -> np.ndarray:
        """``beta(a, 1)`` for constant mode, indexed by action - 1."""
        return np.arange(self.spec.m, dtype=float)

    # replications -----------------------------------------------------------
    def generate_log(self, rng: RngPlan):
        """One logged sample plus its logging and target policies."""
        spec = self.spec
        gen = rng.stream_for(0, "log")
        X = draw_contexts(self.V, spec.n, gen)
        ml = self.logging_policy(X)
        pi = self.target_policy(X)
        probs = ml.evaluate(X)
        cum = np.cumsum(probs, axis=1)
        draw = gen.random(spec.n)
        A = 1 + np.minimum((cum < draw[:, None] * cum[:, -1:]).sum(axis=1), spec.m - 1)
        X2 = X * X
        u = gen.standard_normal(spec.n)
        if spec.effect_mode == "constant":
            Y = 0.75 * X2 @ self.alphas.alpha0 + 0.25 * u + gen.normal(loc=A.astype(float), scale=1.0)
        else:
            Y = X2 @ (0.75 * self.alphas.alpha0) + np.einsum("ij,ij->i", X2, self.alphas.alpha[A - 1]) + 0.25 * u
        data = LogDataset(ContextMatrix(X), A, Y, spec.m)
        return data, ml, pi


# ------------------------------------------------------------------ reporting


@dataclass
class McRow:
    estimator: str
    delta: Optional[float]
    bias: float
    sd: float
    rmse: float
    avg_subsample_n: float
    reps_ok: int
    reps_failed: int


@dataclass
class McReport:
    spec: DgpSpec
    reps: int
    true_value: float
    rows: list
    failures: list = field(default_factory=list)

    def row(self, estimator: str, delta: Optional[float] = None) -> McRow:
        for r in self.rows:
            if r.estimator == estimator and (delta is None or r.delta == delta):
                return r
        raise KeyError((estimator, delta))

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "spec": asdict(self.spec),
            "reps": self.reps,
            "true_value": self.true_value,
            "rows": [asdict(r) for r in self.rows],
            "failures": self.failures,
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path) -> None:
        cols = ["estimator", "delta", "bias", "sd", "rmse", "avg_subsample_n", "reps_ok", "reps_failed"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                d = asdict(r)
                w.writerow(["" if d[c] is None else (repr(d[c]) if isinstance(d[c], float) else d[c]) for c in cols])


def summarize(errors: Sequence[float]):
    """Bias, population SD and RMSE of replication errors (exact identity rmse^2 = bias^2 + sd^2)."""
    e = [float(x) for x in errors]
    if not e:
        return math.nan, math.nan, math.nan
    k = len(e)
    bias = math.fsum(e) / k
    sd = math.sqrt(math.fsum((x - bias) ** 2 for x in e) / k)
    return bias, sd, math.sqrt(bias * bias + sd * sd)


def _replicate(study: Study, r: int, plan: RngPlan, estimators, deltas, threads_aps: int = 1):
    rep_plan = plan.child("replication", r)
    data, ml, pi = study.generate_log(rep_plan)
    truth = study.true_value(pi)
    shift = policy_shift(data, ml, pi)
    out = {"truth": truth, "results": {}, "errors": []}
    normed = data.with_contexts(normalize_contexts(data.contexts))
    for name in estimators:
        keys = [(name, d) for d in deltas] if name == "aps" else [(name, None)]
        for key in keys:
            try:
                if name == "aps":
                    aps = compute_aps(normed, ml, key[1], study.spec.draws, rep_plan.child("aps"), threads=threads_aps)
                    res = resolve_effects(normed, aps)
                    est = estimate_value(data, ml, pi, res, aps)
                    out["results"][key] = (est.v_hat, res.union_size(normed, aps))
                elif name in ("md_ab", "md_full"):
                    restrict = "full_support_region" if name == "md_ab" else "all"
                    betas = {a: baseline_mean_difference(data, a, restrict, ml) for a in range(2, data.m + 1)}
                    v, _, _ = value_from_effects(data, shift, betas)
                    if name == "md_ab":
                        n_used = int(np.sum(np.all(ml.evaluate(data.contexts.policy_inputs()) > 0, axis=1)))
                    else:
                        n_used = data.n
                    out["results"][key] = (v, n_used)
                elif name == "direct":
                    out["results"][key] = (baseline_direct_method(data, pi), data.n)
                else:
                    raise ConfigError(f"unknown estimator {name!r}", field="estimators")
            except ConfigError:
                raise
            except ApsError as exc:
                out["errors"].append({"rep": r, "estimator": name, "delta": key[1], "error": str(exc)})
    return out


def run_experiment(
    spec: DgpSpec,
    estimators: Optional[Sequence[str]] = None,
    deltas: Sequence[float] = DEFAULT_DELTAS,
    reps: int = 100,
    threads: int = 1,
    study: Optional[Study] = None,
    progress: Optional[Callable[[int, int], None]] = None,
) -> McReport:
    """Replicate the experiment ``reps`` times and aggregate bias/SD/RMSE.

    Replication ``r`` draws from its own stream, so the report does not depend
    on ``threads`` or scheduling. Failed estimator runs are counted, never
    dropped silently.
    """
    if reps < 2:
        raise ConfigError("reps must be at least 2", field="reps")
    estimators = tuple(estimators or DEFAULT_ESTIMATORS[spec.experiment])
    for name in estimators:
        if name not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {name!r}", field="estimators")
    if "md_ab" in estimators and spec.experiment != "exp1":
        raise ConfigError("the A/B-sample baseline needs the exp1 A/B segment", field="estimators")
    deltas = tuple(float(d) for d in deltas)
    if any(not d > 0 for d in deltas):
        raise ConfigError("every delta must be positive", field="deltas")
    if spec.n >= 50_000 and reps >= 1_000:
        warnings.warn("full-scale run: expect a long runtime", RuntimeWarning, stacklevel=2)

    study = study or Study.build(spec)
    plan = RngPlan(spec.seed).child("experiment")

    def one(r):
        res = _replicate(study, r, plan, estimators, deltas)
        if progress is not None:
            progress(r, reps)
        return res

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(one, range(reps)))
    else:
        outs = [one(r) for r in range(reps)]

    rows, failures = [], []
    for out in outs:
        failures.extend(out["errors"])
    for name in estimators:
        for d in deltas if name == "aps" else (None,):
            key = (name, d)
            errs = [o["results"][key][0] - o["truth"] for o in outs if key in o["results"]]
            ns = [o["results"][key][1] for o in outs if key in o["results"]]
            bias, sd, rmse = summarize(errs)
            rows.append(
                McRow(
                    estimator=name,
                    delta=d,
                    bias=bias,
                    sd=sd,
                    rmse=rmse,
                    avg_subsample_n=math.fsum(ns) / len(ns) if ns else math.nan,
                    reps_ok=len(errs),
                    reps_failed=reps - len(errs),
                )
            )
    truth = math.fsum(o["truth"] for o in outs) / len(outs)
    return McReport(spec=spec, reps=reps, true_value=truth, rows=rows, failures=failures)


def replicate_effects(spec: DgpSpec, delta: float, reps: int, study: Optional[Study] = None) -> np.ndarray:
    """``beta_hat(a, 1)`` per replication (rows) and action ``a = 2..m`` (columns)."""
    study = study or Study.build(spec)
    plan = RngPlan(spec.seed).child("experiment")
    out = np.full((reps, spec.m - 1), np.nan)
    for r in range(reps):
        rep_plan = plan.child("replication", r)
        data, ml, _ = study.generate_log(rep_plan)
        normed = data.with_contexts(normalize_contexts(data.contexts))
        aps = compute_aps(normed, ml, delta, spec.draws, rep_plan.child("aps"))
        res = resolve_effects(normed, aps)
        for a, fit in res.fits.items():
            out[r, a - 2] = fit.beta_hat
    return out
