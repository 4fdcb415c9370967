"""Simulated approximate propensity scores.

``p_hat[i, a]`` averages the logging policy's probability of action ``a`` over
``draws`` points drawn uniformly from the open ball of radius ``delta`` around
record ``i`` in normalized continuous-context space. Discrete columns stay
fixed.

A point of a uniform ``p``-ball is ``delta * U**(1/p) * g / |g|`` with ``g``
standard normal. Policies only see ``W x`` for a small feature map ``W``, so
only the projection of the offset onto the row space of ``W`` matters. With an
orthonormal basis ``B`` of that ``r``-dimensional space, ``B' g`` is standard
normal in ``r`` dimensions and ``|g|^2 - |B' g|^2`` is an independent
chi-square with ``p - r`` degrees of freedom, so the projection is drawn
exactly without materializing the other ``p - r`` coordinates.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.special import betainc

from .core import ContextMatrix, LogDataset, RngPlan, normalize_contexts
from .exceptions import ConfigError, DimensionMismatch, NonPositiveBandwidth, OffsetOutOfRange
from .policy import Policy

DEFAULT_DRAWS = 100
BLOCK_SIZE = 256


def _check_delta(delta):
    if not np.isfinite(delta) or delta <= 0:
        raise NonPositiveBandwidth(f"bandwidth must be positive, got {delta}")


def sample_uniform_ball(center, delta: float, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """Uniform draw(s) from the open ball ``{x : |x - center| < delta}``."""
    _check_delta(delta)
    center = np.atleast_1d(np.asarray(center, dtype=float))
    p = center.shape[0]
    shape = (1 if size is None else size, p)
    g = rng.standard_normal(shape)
    norm = np.sqrt(np.einsum("ij,ij->i", g, g))
    r = delta * rng.random(shape[0]) ** (1.0 / p)
    pts = center + g * (r / norm)[:, None]
    return pts[0] if size is None else pts


@dataclass(frozen=True)
class BallSampler:
    """Uniform ball draws in ``dim`` dimensions, optionally projected.

    With ``basis`` (``dim x r``, orthonormal columns) the sampler returns the
    coordinates of each draw in that basis instead of the full point.
    """

    dim: int
    delta: float
    basis: Optional[np.ndarray] = None

    def __post_init__(self):
        _check_delta(self.delta)
        if self.dim < 1:
            raise ConfigError("ball dimension must be at least 1")
        if self.basis is not None and self.basis.shape[0] != self.dim:
            raise DimensionMismatch("basis rows must equal the ball dimension")

    @property
    def rank(self) -> int:
        return self.dim if self.basis is None else self.basis.shape[1]

    def offsets(self, rng: np.random.Generator, shape) -> np.ndarray:
        """Offsets of shape ``shape + (rank,)`` in basis coordinates."""
        shape = tuple(np.atleast_1d(shape))
        r = self.rank
        g = rng.standard_normal(shape + (r,))
        sq = np.einsum("...j,...j->...", g, g)
        rest = self.dim - r
        if rest > 0:
            sq = sq + rng.chisquare(rest, size=shape)
        radius = self.delta * rng.random(shape) ** (1.0 / self.dim)
        return g * (radius / np.sqrt(sq))[..., None]

    def draw(self, center, rng: np.random.Generator, size: int = 1) -> np.ndarray:
        """Full points (when ``basis`` is None) or basis coordinates around ``center``."""
        center = np.asarray(center, dtype=float)
        if center.shape[-1] != self.dim:
            raise DimensionMismatch("center has the wrong dimension")
        off = self.offsets(rng, (size,))
        return center + off if self.basis is None else center @ self.basis + off


def k_profile(v, p: int):
    """Limiting APS of a halfspace at signed normalized offset ``v``.

    The share of the unit ``p``-ball lying on the positive side of a
    hyperplane at distance ``|v|`` from the center, written with the
    regularized incomplete beta function. Increasing in ``v``; ``k(0) = 1/2``.
    """
    v = np.asarray(v, dtype=float)
    if p < 1:
        raise OffsetOutOfRange("dimension must be at least 1")
    if np.any(~(np.abs(v) < 1)):
        raise OffsetOutOfRange("offset must lie strictly inside (-1, 1)")
    half_cap = 0.5 * betainc((p + 1) / 2.0, 0.5, 1.0 - v * v)
    out = np.where(v >= 0, 1.0 - half_cap, half_cap)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ApsTable:
    """Simulated APS for every record and action.

    ``q_hat[:, a - 2]`` is ``p_a / (p_a + p_1)`` for ``a = 2..m``; it is NaN
    when both scores are zero.
    """

    p_hat: np.ndarray
    q_hat: np.ndarray
    delta: float
    draws: int
    seed: Optional[int] = None
    seed_path: tuple = field(default=())

    @property
    def n(self) -> int:
        return self.p_hat.shape[0]

    @property
    def m(self) -> int:
        return self.p_hat.shape[1]

    def q(self, a: int, baseline: int = 1) -> np.ndarray:
        """Pairwise share of ``a`` against ``baseline``; NaN where undefined."""
        if baseline == 1 and a >= 2:
            return self.q_hat[:, a - 2]
        return pairwise_share(self.p_hat, a, baseline)

    def overlap_fraction(self) -> dict:
        """Share of records with ``q`` strictly inside (0, 1), per pair against action 1."""
        out = {}
        for a in range(2, self.m + 1):
            q = self.q_hat[:, a - 2]
            out[a] = float(np.mean((q > 0) & (q < 1)))
        return out

    def to_csv(self, path, action_labels=None) -> None:
        labels = action_labels or [str(a) for a in range(1, self.m + 1)]
        header = ["record_id"] + [f"p_hat_{lab}" for lab in labels] + [f"q_hat_{lab}" for lab in labels[1:]]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i in range(self.n):
                w.writerow([i + 1] + [repr(float(v)) for v in self.p_hat[i]] + [repr(float(v)) for v in self.q_hat[i]])


def pairwise_share(p_hat: np.ndarray, a: int, baseline: int = 1) -> np.ndarray:
    pa = p_hat[:, a - 1]
    pb = p_hat[:, baseline - 1]
    denom = pa + pb
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, pa / np.where(denom > 0, denom, 1.0), np.nan)


def _projection(policy: Policy, contexts: ContextMatrix):
    """Feature map, its continuous-block basis and the reduced linear map."""
    p_c, p_d = contexts.p_c, contexts.p_d
    W = policy.feature_map()
    if W.shape[0] == 0:
        return None, None, None
    if W.shape[1] != p_c + p_d:
        raise DimensionMismatch(f"policy reads {W.shape[1]} inputs; data has {p_c + p_d}")
    A = W[:, :p_c] * contexts.col_stds
    if p_c == 0 or not np.any(A):
        return W, None, None
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    r = int(np.sum(s > s[0] * 1e-12))
    basis = Vt[:r].T
    reduced = U[:, :r] * s[:r]
    return W, basis, reduced


def compute_aps(
    data: Union[LogDataset, ContextMatrix],
    policy: Policy,
    delta: float,
    draws: int = DEFAULT_DRAWS,
    rng: Union[RngPlan, int] = 0,
    threads: int = 1,
    block_size: int = BLOCK_SIZE,
) -> ApsTable:
    """Monte Carlo APS of ``policy`` for every record.

    Records are processed in fixed blocks of ``block_size``; block ``b`` uses
    stream ``(b, "aps")`` of ``rng``, so the table does not depend on
    ``threads``. Contexts are normalized first if they are not already.
    """
    _check_delta(delta)
    draws = int(draws)
    if draws < 1:
        raise ConfigError("draws must be at least 1", field="draws")
    plan = rng if isinstance(rng, RngPlan) else RngPlan(int(rng))
    contexts = data.contexts if isinstance(data, LogDataset) else data
    if not contexts.normalized:
        contexts = normalize_contexts(contexts)
    if policy.n_inputs is not None and policy.n_inputs != contexts.p_c + contexts.p_d:
        raise DimensionMismatch(f"policy expects {policy.n_inputs} inputs; data has {contexts.p_c + contexts.p_d}")

    if isinstance(data, LogDataset) and policy.m != data.m:
        raise DimensionMismatch(f"policy has {policy.m} actions; data has {data.m}")
    inputs = contexts.policy_inputs()
    n = contexts.n
    W, basis, reduced = _projection(policy, contexts)

    if W is None or basis is None:
        # the policy cannot see the continuous block: APS equals the policy itself
        p_hat = policy.evaluate(inputs)
    else:
        sampler = BallSampler(contexts.p_c, float(delta), basis)
        F0 = inputs @ W.T

        def run(b):
            lo, hi = b * block_size, min(n, (b + 1) * block_size)
            gen = plan.stream_for(b, "aps")
            off = sampler.offsets(gen, (hi - lo, draws))
            F = F0[lo:hi, None, :] + off @ reduced.T
            probs = policy.from_features(F.reshape(-1, F.shape[-1])).reshape(hi - lo, draws, -1)
            mean = probs.mean(axis=1)
            same = np.all(probs.max(axis=1) == probs.min(axis=1), axis=1)
            return np.where(same[:, None], probs[:, 0, :], mean)

        blocks = range((n + block_size - 1) // block_size)
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(run, blocks))
        else:
            parts = [run(b) for b in blocks]
        p_hat = np.vstack(parts)

    m = p_hat.shape[1]
    q_hat = np.column_stack([pairwise_share(p_hat, a) for a in range(2, m + 1)]) if m > 1 else np.zeros((n, 0))
    p_hat.setflags(write=False)
    q_hat.setflags(write=False)
    return ApsTable(p_hat=p_hat, q_hat=q_hat, delta=float(delta), draws=draws, seed=plan.master_seed, seed_path=plan.path)
