"""Log data containers, context normalization, CSV I/O and seeding."""

from __future__ import annotations

import csv
import math
import warnings
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .exceptions import (
    DataError,
    EmptyDataset,
    MissingValue,
    ParseError,
    UnknownAction,
)

_MISSING_TOKENS = {"", "na", "nan", "null", "none"}


def _frozen(arr, dtype=float, ndim=None):
    out = np.array(arr, dtype=dtype, copy=True)
    if ndim is not None and out.ndim != ndim:
        raise DataError(f"expected a {ndim}-d array, got shape {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ContextMatrix:
    """Continuous features plus optional pass-through discrete columns.

    ``values`` holds the continuous block, normalized or not. ``col_means`` and
    ``col_stds`` map it back to raw units via ``values * col_stds + col_means``;
    for a matrix that was never normalized they are zeros and ones.
    """

    values: np.ndarray
    discrete: Optional[np.ndarray] = None
    col_means: Optional[np.ndarray] = None
    col_stds: Optional[np.ndarray] = None
    normalized: bool = False
    zero_variance: tuple = ()
    feature_names: tuple = ()
    discrete_names: tuple = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        values = _frozen(values, ndim=2)
        n, p_c = values.shape
        discrete = self.discrete
        if discrete is None:
            discrete = np.zeros((n, 0), dtype=np.int64)
        discrete = np.asarray(discrete)
        if discrete.ndim == 1:
            discrete = discrete[:, None]
        discrete = _frozen(discrete, dtype=np.int64, ndim=2)
        if discrete.shape[0] != n:
            raise DataError("discrete and continuous blocks differ in row count")
        means = np.zeros(p_c) if self.col_means is None else self.col_means
        stds = np.ones(p_c) if self.col_stds is None else self.col_stds
        means = _frozen(means, ndim=1)
        stds = _frozen(stds, ndim=1)
        if means.shape[0] != p_c or stds.shape[0] != p_c:
            raise DataError("col_means/col_stds must have one entry per continuous column")
        if np.any(stds <= 0):
            raise DataError("col_stds must be strictly positive")
        names = tuple(self.feature_names) or tuple(f"x{j + 1}" for j in range(p_c))
        dnames = tuple(self.discrete_names) or tuple(f"d{j + 1}" for j in range(discrete.shape[1]))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "discrete", discrete)
        object.__setattr__(self, "col_means", means)
        object.__setattr__(self, "col_stds", stds)
        object.__setattr__(self, "zero_variance", tuple(int(j) for j in self.zero_variance))
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "discrete_names", dnames)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p_c(self) -> int:
        return self.values.shape[1]

    @property
    def p_d(self) -> int:
        return self.discrete.shape[1]

    def raw_values(self) -> np.ndarray:
        """Continuous block in original units."""
        if not self.normalized:
            return self.values
        return self.values * self.col_stds + self.col_means

    def policy_inputs(self) -> np.ndarray:
        """Rows as policies see them: raw continuous columns, then discrete ones."""
        return np.hstack([self.raw_values(), self.discrete.astype(float)])

    def take(self, idx) -> "ContextMatrix":
        return replace(self, values=self.values[idx], discrete=self.discrete[idx])


def normalize_contexts(raw: ContextMatrix) -> ContextMatrix:
    """Z-score every continuous column using the sample itself.

    Population (``ddof=0``) standard deviations are used. Zero-variance columns
    are neither centered nor scaled; they are listed in ``zero_variance`` and a
    warning is emitted. Normalizing an already normalized matrix re-derives the
    statistics from the raw values, so the operation is idempotent.
    """
    if raw.n == 0:
        raise EmptyDataset("cannot normalize an empty context matrix")
    if raw.n < 2:
        raise DataError("normalization needs at least two rows")
    base = raw.raw_values()
    means = base.mean(axis=0)
    stds = base.std(axis=0)
    flat = np.flatnonzero(~(stds > 0) | ~np.isfinite(stds))
    means[flat] = 0.0
    stds[flat] = 1.0
    if flat.size:
        warnings.warn(
            "zero-variance continuous columns left unscaled: "
            + ", ".join(raw.feature_names[j] for j in flat),
            RuntimeWarning,
            stacklevel=2,
        )
    return replace(
        raw,
        values=(base - means) / stds,
        col_means=means,
        col_stds=stds,
        normalized=True,
        zero_variance=tuple(int(j) for j in flat),
    )


@dataclass(frozen=True)
class LogDataset:
    """Aligned log records ``(Y_i, X_i, A_i)`` with actions coded ``1..m``."""

    contexts: ContextMatrix
    actions: np.ndarray
    rewards: np.ndarray
    m: int
    action_labels: tuple = ()
    extra_rewards: Mapping[str, np.ndarray] = field(default_factory=dict)
    reward_name: str = "reward"

    def __post_init__(self):
        actions = np.asarray(self.actions)
        if actions.size and not np.all(np.equal(np.mod(actions, 1), 0)):
            raise DataError("action codes must be integers")
        actions = _frozen(actions, dtype=np.int64, ndim=1)
        rewards = _frozen(self.rewards, ndim=1)
        n = self.contexts.n
        if n == 0:
            raise EmptyDataset("log dataset has no records")
        if actions.shape[0] != n or rewards.shape[0] != n:
            raise DataError(
                f"length mismatch: contexts {n}, actions {actions.shape[0]}, rewards {rewards.shape[0]}"
            )
        m = int(self.m)
        if m < 1:
            raise DataError("m must be positive")
        if actions.min() < 1 or actions.max() > m:
            raise UnknownAction(f"action codes must lie in 1..{m}")
        labels = tuple(self.action_labels) or tuple(str(a) for a in range(1, m + 1))
        if len(labels) != m:
            raise DataError("need one external label per action")
        extra = {}
        for name, col in dict(self.extra_rewards).items():
            col = _frozen(col, ndim=1)
            if col.shape[0] != n:
                raise DataError(f"extra reward {name!r} has wrong length")
            extra[name] = col
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "action_labels", labels)
        object.__setattr__(self, "extra_rewards", extra)

    @property
    def n(self) -> int:
        return self.rewards.shape[0]

    def with_contexts(self, contexts: ContextMatrix) -> "LogDataset":
        return replace(self, contexts=contexts)

    def with_rewards(self, rewards, name="reward") -> "LogDataset":
        return replace(self, rewards=rewards, reward_name=name)

    def normalized(self) -> "LogDataset":
        if self.contexts.normalized:
            return self
        return self.with_contexts(normalize_contexts(self.contexts))


def _tag_key(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag)
    return zlib.crc32(str(tag).encode("utf-8"))


@dataclass(frozen=True)
class RngPlan:
    """Counter-style seeding: every (purpose, index) pair owns a stream.

    Streams are derived with :class:`numpy.random.SeedSequence` spawn keys, so
    the same ``(master_seed, path, purpose, index)`` always reproduces the
    same draws no matter which worker asks for them or in which order.
    """

    master_seed: int
    path: tuple = ()

    def __post_init__(self):
        seed = int(self.master_seed)
        if not 0 <= seed < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "master_seed", seed)

    def seed_sequence(self, index: int, purpose) -> np.random.SeedSequence:
        key = self.path + (_tag_key(purpose), int(index))
        return np.random.SeedSequence(self.master_seed, spawn_key=key)

    def stream_for(self, index: int, purpose="default") -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed_sequence(index, purpose)))

    def child(self, purpose, index: int = 0) -> "RngPlan":
        return RngPlan(self.master_seed, self.path + (_tag_key(purpose), int(index)))


# --------------------------------------------------------------------- CSV I/O


@dataclass(frozen=True)
class CsvSchema:
    """Column roles for a log file.

    ``missing`` is ``"error"`` (default) or ``"drop-row"``. ``actions`` fixes
    the external label order; otherwise labels are sorted (numerically when
    every label parses as a number).
    """

    reward: str
    action: str
    features: tuple = ()
    discrete: tuple = ()
    extra_rewards: tuple = ()
    actions: Optional[tuple] = None
    missing: str = "error"

    @classmethod
    def from_dict(cls, d: Mapping) -> "CsvSchema":
        from .exceptions import ConfigError

        try:
            return cls(
                reward=str(d["reward"]),
                action=str(d["action"]),
                features=tuple(d.get("features", ())),
                discrete=tuple(d.get("discrete", ())),
                extra_rewards=tuple(d.get("extra_rewards", ())),
                actions=None if d.get("actions") is None else tuple(str(a) for a in d["actions"]),
                missing=str(d.get("missing", "error")),
            )
        except KeyError as exc:
            raise ConfigError(f"schema is missing {exc.args[0]!r}", field=f"schema.{exc.args[0]}") from None

    def to_dict(self) -> dict:
        out = {
            "reward": self.reward,
            "action": self.action,
            "features": list(self.features),
            "discrete": list(self.discrete),
            "extra_rewards": list(self.extra_rewards),
            "missing": self.missing,
        }
        if self.actions is not None:
            out["actions"] = list(self.actions)
        return out


def _sort_labels(labels):
    try:
        return sorted(labels, key=float)
    except ValueError:
        return sorted(labels)


def load_csv(path, schema: CsvSchema) -> LogDataset:
    """Read a UTF-8 CSV with a header row into a :class:`LogDataset`."""
    if schema.missing not in ("error", "drop-row"):
        from .exceptions import ConfigError

        raise ConfigError(f"unknown missing-value policy {schema.missing!r}", field="schema.missing")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyDataset(f"{path}: file is empty") from None
        index = {name: j for j, name in enumerate(header)}
        float_cols = [schema.reward, *schema.features, *schema.extra_rewards]
        wanted = [schema.action, *float_cols, *schema.discrete]
        for name in wanted:
            if name not in index:
                raise ParseError("column not found in header", row=1, column=name)

        rows = []
        dropped = 0
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", row=lineno)
            rec = {}
            missing = False
            for name in wanted:
                cell = row[index[name]].strip()
                if cell.lower() in _MISSING_TOKENS:
                    if schema.missing == "drop-row":
                        missing = True
                        break
                    raise MissingValue("missing value", row=lineno, column=name)
                if name == schema.action:
                    rec[name] = cell
                    continue
                try:
                    val = float(cell)
                except ValueError:
                    raise ParseError(f"cannot parse {cell!r} as a number", row=lineno, column=name) from None
                if name in schema.discrete:
                    if not val.is_integer():
                        raise ParseError("discrete column holds a non-integer", row=lineno, column=name)
                    val = int(val)
                elif not math.isfinite(val):
                    raise ParseError("non-finite value", row=lineno, column=name)
                rec[name] = val
            if missing:
                dropped += 1
                continue
            rows.append(rec)

    if dropped:
        warnings.warn(f"{path}: dropped {dropped} row(s) with missing values", RuntimeWarning, stacklevel=2)
    if not rows:
        raise EmptyDataset(f"{path}: no usable records")

    seen = {r[schema.action] for r in rows}
    if schema.actions is not None:
        labels = list(schema.actions)
        unknown = sorted(seen - set(labels))
        if unknown:
            raise UnknownAction(f"actions {unknown} are not in the declared set {labels}")
    else:
        labels = _sort_labels(seen)
    code = {lab: k + 1 for k, lab in enumerate(labels)}

    n = len(rows)
    values = np.array([[r[f] for f in schema.features] for r in rows], dtype=float).reshape(n, len(schema.features))
    discrete = np.array([[r[f] for f in schema.discrete] for r in rows], dtype=np.int64).reshape(n, len(schema.discrete))
    contexts = ContextMatrix(
        values=values,
        discrete=discrete,
        feature_names=tuple(schema.features),
        discrete_names=tuple(schema.discrete),
    )
    return LogDataset(
        contexts=contexts,
        actions=np.array([code[r[schema.action]] for r in rows]),
        rewards=np.array([r[schema.reward] for r in rows]),
        m=len(labels),
        action_labels=tuple(labels),
        extra_rewards={name: np.array([r[name] for r in rows]) for name in schema.extra_rewards},
        reward_name=schema.reward,
    )


def write_csv(dataset: LogDataset, path, schema: Optional[CsvSchema] = None) -> CsvSchema:
    """Write ``dataset`` in raw units; returns the schema needed to read it back."""
    ctx = dataset.contexts
    if schema is None:
        schema = CsvSchema(
            reward=dataset.reward_name,
            action="action",
            features=ctx.feature_names,
            discrete=ctx.discrete_names,
            extra_rewards=tuple(dataset.extra_rewards),
            actions=dataset.action_labels,
        )
    raw = ctx.raw_values()
    header = [schema.action, schema.reward, *schema.features, *schema.discrete, *schema.extra_rewards]
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(dataset.n):
            w.writerow(
                [dataset.action_labels[dataset.actions[i] - 1], repr(float(dataset.rewards[i]))]
                + [repr(float(v)) for v in raw[i]]
                + [str(int(v)) for v in ctx.discrete[i]]
                + [repr(float(dataset.extra_rewards[k][i])) for k in schema.extra_rewards]
            )
    return schema


def as_dataset(X, actions, rewards, m=None, discrete=None) -> LogDataset:
    """Build a dataset from plain arrays; ``actions`` must already be coded 1..m."""
    actions = np.asarray(actions)
    return LogDataset(
        contexts=ContextMatrix(values=np.asarray(X, dtype=float), discrete=discrete),
        actions=actions,
        rewards=np.asarray(rewards, dtype=float),
        m=int(m if m is not None else actions.max()),
    )


__all__ = [
    "ContextMatrix",
    "LogDataset",
    "RngPlan",
    "CsvSchema",
    "normalize_contexts",
    "load_csv",
    "write_csv",
    "as_dataset",
]

