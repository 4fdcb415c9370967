"""Command line: ``apsope simulate | evaluate | aps``.

Settings come from an optional TOML or JSON config file; command-line flags
override it. A seed is always required. Exit codes: 0 success, 2 config
error, 3 data error, 4 numerical failure. On failure a JSON error object is
printed to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .aps import DEFAULT_DRAWS, compute_aps
from .core import CsvSchema, load_csv, normalize_contexts
from .estimator import effect_ratio, estimate_value, fit_pairwise, resolve_effects
from .exceptions import ApsError, ConfigError, MissingFit
from .policy import load_policy
from .simlab import DEFAULT_ESTIMATORS, ESTIMATORS, DEFAULT_DELTAS, DgpSpec, run_experiment

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("apsope")

SCHEMA_VERSION = 1


# ------------------------------------------------------------------ config


def _csv_floats(text):
    return [float(t) for t in str(text).split(",") if t.strip()]


def _csv_strings(text):
    return [t.strip() for t in str(text).split(",") if t.strip()]


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", field="config") from exc
    try:
        if p.suffix.lower() == ".toml":
            return tomllib.loads(raw.decode("utf-8"))
        return json.loads(raw.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config: {exc}", field="config") from exc


def merge(config: dict, args: argparse.Namespace, keys) -> dict:
    out = dict(config)
    for key in keys:
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def _require(cfg, key):
    if cfg.get(key) is None:
        raise ConfigError(f"missing required setting {key!r}", field=key)
    return cfg[key]


def _seed(cfg) -> int:
    seed = _require(cfg, "seed")
    try:
        seed = int(seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError("seed must be an integer", field="seed") from exc
    if seed < 0:
        raise ConfigError("seed must be non-negative", field="seed")
    return seed


def _deltas(cfg, default=None):
    vals = cfg.get("deltas", default)
    if vals is None:
        raise ConfigError("missing required setting 'deltas'", field="deltas")
    if isinstance(vals, (int, float, str)):
        vals = _csv_floats(vals) if isinstance(vals, str) else [vals]
    try:
        vals = [float(v) for v in vals]
    except (TypeError, ValueError) as exc:
        raise ConfigError("deltas must be numbers", field="deltas") from exc
    if not vals:
        raise ConfigError("deltas must not be empty", field="deltas")
    for i, v in enumerate(vals):
        if not v > 0:
            raise ConfigError(f"delta must be positive, got {v}", field=f"deltas[{i}]")
    return vals


def _positive_int(cfg, key, default, minimum=1):
    val = cfg.get(key, default)
    try:
        val = int(val)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key} must be an integer", field=key) from exc
    if val < minimum:
        raise ConfigError(f"{key} must be at least {minimum}", field=key)
    return val


def _schema(cfg) -> CsvSchema:
    sch = dict(cfg.get("schema") or {})
    for key in ("reward", "action", "features", "discrete", "extra_rewards", "missing", "actions"):
        if cfg.get(key) is not None:
            sch[key] = cfg[key]
    for key in ("features", "discrete", "extra_rewards", "actions"):
        if isinstance(sch.get(key), str):
            sch[key] = _csv_strings(sch[key])
    for key in ("reward", "action", "features"):
        if not sch.get(key):
            raise ConfigError(f"schema needs {key!r}", field=f"schema.{key}")
    try:
        return CsvSchema.from_dict(sch)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"invalid schema: {exc}", field="schema") from exc


def _out_dir(cfg) -> Path:
    out = Path(_require(cfg, "out_dir"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


# ------------------------------------------------------------------ commands


SIM_KEYS = ("experiment", "effect_mode", "n", "reps", "deltas", "draws", "seed", "estimators", "out_dir", "n_train", "truth_draws", "ucb_c")


def cmd_simulate(cfg: dict, threads: int) -> dict:
    seed = _seed(cfg)
    experiment = str(cfg.get("experiment", "exp1")).lower()
    full = bool(cfg.get("full_scale", False))
    n = _positive_int(cfg, "n", 50_000 if full else 10_000, minimum=10)
    reps = _positive_int(cfg, "reps", 1_000 if full else 100, minimum=2)
    estimators = cfg.get("estimators")
    if isinstance(estimators, str):
        estimators = _csv_strings(estimators)
    if estimators is not None:
        for name in estimators:
            if name not in ESTIMATORS:
                raise ConfigError(f"unknown estimator {name!r}", field="estimators")
    spec = DgpSpec(
        experiment=experiment,
        effect_mode=str(cfg.get("effect_mode", "constant")).lower(),
        n=n,
        seed=seed,
        n_train=_positive_int(cfg, "n_train", 10_000, minimum=10),
        ucb_c=float(cfg.get("ucb_c", 2.0)),
        draws=_positive_int(cfg, "draws", DEFAULT_DRAWS),
        truth_draws=_positive_int(cfg, "truth_draws", 1_000_000, minimum=1000),
    )
    out = _out_dir(cfg)

    def progress(r, total):
        log.info("replication %d/%d done", r + 1, total)

    report = run_experiment(
        spec,
        estimators=estimators or DEFAULT_ESTIMATORS[spec.experiment],
        deltas=_deltas(cfg, DEFAULT_DELTAS),
        reps=reps,
        threads=threads,
        progress=progress,
    )
    report.to_csv(out / "report.csv")
    report.to_json(out / "report.json")
    return {"schema_version": SCHEMA_VERSION, "status": "ok", "outputs": ["report.csv", "report.json"]}


DATA_KEYS = ("data", "ml", "pi", "deltas", "draws", "seed", "out_dir", "reward", "action", "features", "discrete", "extra_rewards", "missing", "ratio_outcome", "actions")


def _load_inputs(cfg, need_pi: bool):
    data = load_csv(_require(cfg, "data"), _schema(cfg))
    ml = load_policy(_require(cfg, "ml"))
    pi = load_policy(_require(cfg, "pi")) if need_pi else None
    return data, ml, pi


def cmd_evaluate(cfg: dict, threads: int) -> dict:
    seed = _seed(cfg)
    deltas = _deltas(cfg, [1.0])
    draws = _positive_int(cfg, "draws", DEFAULT_DRAWS)
    out = _out_dir(cfg)
    ratio_outcome = cfg.get("ratio_outcome")
    data, ml, pi = _load_inputs(cfg, need_pi=True)
    if ratio_outcome is not None and ratio_outcome not in data.extra_rewards:
        raise ConfigError(f"ratio outcome {ratio_outcome!r} is not an extra reward column", field="ratio_outcome")
    normed = data.with_contexts(normalize_contexts(data.contexts))
    results = []
    for delta in deltas:
        aps = compute_aps(normed, ml, delta, draws, seed, threads=threads)
        res = resolve_effects(normed, aps)
        try:
            est = estimate_value(data, ml, pi, res, aps)
        except MissingFit as exc:
            exc.details = {"delta": delta, "failures": {str(a): r for a, r in res.failures.items()}, "attempts": res.attempts}
            raise
        entry = est.to_dict()
        entry["unidentified"] = {str(a): r for a, r in sorted(res.failures.items())}
        if ratio_outcome is not None:
            rows = []
            for a in sorted(res.fits):
                den = fit_pairwise(normed, aps, a, outcome=ratio_outcome)
                rows.append(
                    {
                        "a": a,
                        "beta": res.fits[a].beta_hat,
                        "gamma_outcome": den.beta_hat,
                        "ratio": effect_ratio(res.fits[a], den),
                    }
                )
            entry["ratio"] = {"outcome": ratio_outcome, "rows": rows}
        results.append(entry)
        log.info("delta=%s v_hat=%.6f", delta, est.v_hat)
    _write_json(out / "evaluate.json", {"schema_version": SCHEMA_VERSION, "seed": seed, "n": data.n, "m": data.m, "results": results})
    return {"schema_version": SCHEMA_VERSION, "status": "ok", "outputs": ["evaluate.json"], "v_hat": [r["v_hat"] for r in results]}


def cmd_aps(cfg: dict, threads: int) -> dict:
    seed = _seed(cfg)
    deltas = _deltas(cfg, [1.0])
    if len(deltas) != 1:
        raise ConfigError("aps takes a single delta", field="deltas")
    draws = _positive_int(cfg, "draws", DEFAULT_DRAWS)
    out = _out_dir(cfg)
    data, ml, _ = _load_inputs(cfg, need_pi=False)
    aps = compute_aps(data.normalized(), ml, deltas[0], draws, seed, threads=threads)
    aps.to_csv(out / "aps.csv", list(data.action_labels))
    summary = {
        "schema_version": SCHEMA_VERSION,
        "n": aps.n,
        "m": aps.m,
        "delta": aps.delta,
        "draws": aps.draws,
        "seed": seed,
        "overlap_fraction": {str(data.action_labels[a - 1]): f for a, f in aps.overlap_fraction().items()},
    }
    _write_json(out / "aps_summary.json", summary)
    return {"schema_version": SCHEMA_VERSION, "status": "ok", "outputs": ["aps.csv", "aps_summary.json"]}


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--deltas", type=_csv_floats, help="comma-separated bandwidths")
    common.add_argument("--draws", type=int, help="Monte Carlo draws per record")
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("--threads", type=int, default=None, help="worker cap (default: all cores)")
    common.add_argument("--quiet", action="store_true", help="no progress on stderr")

    parser = argparse.ArgumentParser(prog="apsope", description="Off-policy evaluation with approximate propensity scores.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", parents=[common], help="Monte Carlo study with known truth")
    sim.add_argument("--experiment", choices=["exp1", "exp2"])
    sim.add_argument("--effect-mode", dest="effect_mode", choices=["constant", "nonconstant"])
    sim.add_argument("--n", type=int)
    sim.add_argument("--reps", type=int)
    sim.add_argument("--estimators", help="comma-separated subset of " + ",".join(ESTIMATORS))
    sim.add_argument("--n-train", dest="n_train", type=int)
    sim.add_argument("--truth-draws", dest="truth_draws", type=int)
    sim.add_argument("--ucb-c", dest="ucb_c", type=float)
    sim.add_argument("--full-scale", dest="full_scale", action="store_true", default=None)

    for name, help_ in (("evaluate", "value a target policy on logged data"), ("aps", "write the per-record APS audit")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--data", help="log CSV")
        p.add_argument("--ml", help="logging policy JSON")
        p.add_argument("--reward")
        p.add_argument("--action")
        p.add_argument("--features", help="comma-separated continuous columns")
        p.add_argument("--discrete", help="comma-separated discrete columns")
        p.add_argument("--missing", choices=["error", "drop-row"])
        p.add_argument("--actions", help="comma-separated action labels in order; the first is the baseline")
        if name == "evaluate":
            p.add_argument("--pi", help="target policy JSON")
            p.add_argument("--extra-rewards", dest="extra_rewards", help="comma-separated extra outcome columns")
            p.add_argument("--ratio-outcome", dest="ratio_outcome", help="extra outcome used as ratio denominator")
    return parser


COMMANDS = {
    "simulate": (cmd_simulate, SIM_KEYS + ("full_scale",)),
    "evaluate": (cmd_evaluate, DATA_KEYS),
    "aps": (cmd_aps, DATA_KEYS),
}


def _error_payload(exc: BaseException) -> dict:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "status": "error",
        "error": type(exc).__name__,
        "message": str(exc),
        "exit_code": getattr(exc, "exit_code", 4),
    }
    if getattr(exc, "field", None) is not None:
        payload["field"] = exc.field
    if getattr(exc, "details", None) is not None:
        payload["details"] = exc.details
    return payload


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    func, keys = COMMANDS[args.command]
    try:
        if threads < 1:
            raise ConfigError("threads must be at least 1", field="threads")
        cfg = merge(load_config(args.config), args, keys)
        result = func(cfg, threads)
    except ApsError as exc:
        print(json.dumps(_error_payload(exc), sort_keys=True, default=str))
        return getattr(exc, "exit_code", 4)
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
