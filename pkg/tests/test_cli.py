import json
import math

import numpy as np
import pytest

from apsope import ContextMatrix, LinearGreedy, LogDataset, ScoreThreshold, Uniform, save_policy, write_csv
from apsope.cli import main
from apsope.simlab import DgpSpec, Study

SCHEMA_FLAGS = ["--reward", "reward", "--action", "action", "--features", "x1,x2,x3"]


def run(capsys, argv):
    code = main(argv)
    out = capsys.readouterr().out
    return code, json.loads(out.strip().splitlines()[-1])


@pytest.fixture
def threshold_log(tmp_path):
    """Binary threshold logging policy with a known effect of 0.7 and a cost outcome with effect 0.2."""
    rng = np.random.default_rng(8)
    n = 6000
    X = rng.normal(size=(n, 3))
    ml = ScoreThreshold(np.array([1.0, 0.5, 0.0]), 0.2)
    A = 1 + ml.evaluate(X)[:, 1].astype(int)
    Y = X[:, 2] ** 2 + np.sin(X[:, 1]) + 0.7 * (A == 2) + rng.normal(size=n)
    C = 0.2 * (A == 2) + 0.05 * X[:, 0] + 0.1 * rng.normal(size=n)
    d = LogDataset(ContextMatrix(X), A, Y, 2, extra_rewards={"cost": C})
    write_csv(d, tmp_path / "log.csv")
    save_policy(ml, tmp_path / "ml.json")
    save_policy(ScoreThreshold(np.array([1.0, 0.5, 0.0]), -0.5), tmp_path / "pi.json")
    return tmp_path, d


def test_evaluate_threshold_fixture(capsys, threshold_log):
    tmp, d = threshold_log
    argv = ["evaluate", "--data", str(tmp / "log.csv"), "--ml", str(tmp / "ml.json"), "--pi", str(tmp / "pi.json"),
            *SCHEMA_FLAGS, "--extra-rewards", "cost", "--ratio-outcome", "cost", "--seed", "1", "--deltas", "0.5",
            "--out-dir", str(tmp / "out"), "--quiet"]
    code, msg = run(capsys, argv)
    assert code == 0 and msg["status"] == "ok"
    doc = json.loads((tmp / "out" / "evaluate.json").read_text())
    assert doc["schema_version"] == 1
    res = doc["results"][0]
    pair = res["per_pair"][0]
    assert abs(pair["beta"] - 0.7) <= 3 * pair["se"]
    row = res["ratio"]["rows"][0]
    assert row["ratio"] == pytest.approx(row["beta"] / row["gamma_outcome"], rel=1e-12)
    assert abs(row["gamma_outcome"] - 0.2) < 0.05


def test_evaluate_target_equal_logging(capsys, threshold_log):
    tmp, d = threshold_log
    code, _ = run(capsys, ["evaluate", "--data", str(tmp / "log.csv"), "--ml", str(tmp / "ml.json"),
                           "--pi", str(tmp / "ml.json"), *SCHEMA_FLAGS, "--seed", "2", "--out-dir", str(tmp / "o")])
    assert code == 0
    v = json.loads((tmp / "o" / "evaluate.json").read_text())["results"][0]["v_hat"]
    assert abs(v - d.rewards.mean()) <= 1e-12


def test_evaluate_from_simulated_log(capsys, tmp_path):
    """A simlab log plus its own logging policy: pi = ML returns the mean reward."""
    st = Study.build(DgpSpec(seed=1, n=2000, n_train=2000, truth_draws=1000))
    from apsope import RngPlan

    data, ml, _ = st.generate_log(RngPlan(4))
    schema = write_csv(data, tmp_path / "sim.csv")
    save_policy(ml, tmp_path / "ml.json")
    cfg = {"data": str(tmp_path / "sim.csv"), "ml": str(tmp_path / "ml.json"), "pi": str(tmp_path / "ml.json"),
           "schema": schema.to_dict(), "seed": 0, "deltas": [1.0], "draws": 20, "out_dir": str(tmp_path / "o")}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    code, _ = run(capsys, ["evaluate", "--config", str(tmp_path / "cfg.json")])
    assert code == 0
    v = json.loads((tmp_path / "o" / "evaluate.json").read_text())["results"][0]["v_hat"]
    assert abs(v - data.rewards.mean()) <= 1e-12


def test_unidentified_effect_exit_code(capsys, tmp_path):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 3))
    ml = LinearGreedy(np.array([1.0, 0.0, 0.0]), np.zeros((3, 3)))
    d = LogDataset(ContextMatrix(X), np.ones(200, dtype=int), rng.normal(size=200), 3)
    write_csv(d, tmp_path / "log.csv")
    save_policy(ml, tmp_path / "ml.json")
    save_policy(Uniform(3, 3), tmp_path / "pi.json")
    code, msg = run(capsys, ["evaluate", "--data", str(tmp_path / "log.csv"), "--ml", str(tmp_path / "ml.json"),
                             "--pi", str(tmp_path / "pi.json"), *SCHEMA_FLAGS, "--actions", "1,2,3", "--seed", "0",
                             "--out-dir", str(tmp_path / "o")])
    assert code == 4 and msg["error"] == "MissingFit"
    assert set(msg["details"]["failures"]) == {"2", "3"}
    assert msg["details"]["attempts"]


def test_aps_uniform_and_row_count(capsys, tmp_path):
    rng = np.random.default_rng(1)
    d = LogDataset(ContextMatrix(rng.normal(size=(123, 3))), rng.integers(1, 6, size=123), rng.normal(size=123), 5)
    write_csv(d, tmp_path / "log.csv")
    save_policy(Uniform(5, 3), tmp_path / "ml.json")
    code, _ = run(capsys, ["aps", "--data", str(tmp_path / "log.csv"), "--ml", str(tmp_path / "ml.json"),
                           *SCHEMA_FLAGS, "--seed", "5", "--out-dir", str(tmp_path / "o")])
    assert code == 0
    lines = (tmp_path / "o" / "aps.csv").read_text().splitlines()
    assert len(lines) == 124
    assert all(v == "0.2" for line in lines[1:] for v in line.split(",")[1:6])
    summary = json.loads((tmp_path / "o" / "aps_summary.json").read_text())
    assert summary["schema_version"] == 1 and summary["overlap_fraction"]["2"] == 1.0


def test_aps_boundary_fraction_matches_band_probability(capsys, tmp_path):
    """One feature, halfspace at 0: records with q in (0,1) are those within delta of the boundary."""
    rng = np.random.default_rng(2)
    n, delta = 20_000, 0.3
    x = rng.normal(size=n)
    d = LogDataset(ContextMatrix(x), 1 + (x >= 0), rng.normal(size=n), 2)
    write_csv(d, tmp_path / "log.csv")
    save_policy(ScoreThreshold(np.array([1.0]), 0.0), tmp_path / "ml.json")
    code, _ = run(capsys, ["aps", "--data", str(tmp_path / "log.csv"), "--ml", str(tmp_path / "ml.json"),
                           "--reward", "reward", "--action", "action", "--features", "x1", "--seed", "0",
                           "--deltas", str(delta), "--draws", "2000", "--out-dir", str(tmp_path / "o")])
    assert code == 0
    frac = json.loads((tmp_path / "o" / "aps_summary.json").read_text())["overlap_fraction"]["2"]
    # |x - 0| < delta * sd in raw units; the standard normal CDF gives the band mass
    sd, mu = x.std(), x.mean()
    band = 0.5 * (math.erf((mu + delta * sd) / math.sqrt(2)) - math.erf((mu - delta * sd) / math.sqrt(2)))
    assert abs(frac - band) <= 3 * math.sqrt(band * (1 - band) / n) + 2 / 2000


def test_missing_seed_is_config_error(capsys, tmp_path):
    code, msg = run(capsys, ["simulate", "--experiment", "exp1", "--out-dir", str(tmp_path)])
    assert code == 2 and msg["field"] == "seed" and msg["schema_version"] == 1


def test_bad_delta_and_bad_config(capsys, tmp_path):
    code, msg = run(capsys, ["simulate", "--seed", "1", "--deltas", "0.5,-1", "--out-dir", str(tmp_path), "--n", "500"])
    assert code == 2 and msg["field"] == "deltas[1]"
    (tmp_path / "c.toml").write_text("seed = [")
    code, msg = run(capsys, ["simulate", "--config", str(tmp_path / "c.toml")])
    assert code == 2 and msg["field"] == "config"


def test_data_error_exit_code(capsys, tmp_path):
    (tmp_path / "log.csv").write_text("action,reward,x1,x2,x3\n1,oops,0,0,0\n2,1,0,0,1\n")
    save_policy(Uniform(2, 3), tmp_path / "ml.json")
    code, msg = run(capsys, ["aps", "--data", str(tmp_path / "log.csv"), "--ml", str(tmp_path / "ml.json"),
                             *SCHEMA_FLAGS, "--seed", "0", "--out-dir", str(tmp_path / "o")])
    assert code == 3 and msg["status"] == "error"


def test_simulate_toml_with_flag_override(capsys, tmp_path):
    (tmp_path / "c.toml").write_text(
        'experiment = "exp1"\nseed = 7\nn = 800\nreps = 2\ndeltas = [0.5, 1.0]\nn_train = 2000\ntruth_draws = 5000\ndraws = 20\n'
    )
    code, _ = run(capsys, ["simulate", "--config", str(tmp_path / "c.toml"), "--reps", "3", "--out-dir", str(tmp_path / "o")])
    assert code == 0
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert rep["reps"] == 3 and rep["schema_version"] == 1 and rep["spec"]["seed"] == 7
    header = (tmp_path / "o" / "report.csv").read_text().splitlines()[0]
    assert header == "estimator,delta,bias,sd,rmse,avg_subsample_n,reps_ok,reps_failed"


def test_policy_action_count_must_match_data(capsys, tmp_path):
    rng = np.random.default_rng(0)
    d = LogDataset(ContextMatrix(rng.normal(size=(50, 3))), rng.integers(1, 3, size=50), rng.normal(size=50), 2)
    write_csv(d, tmp_path / "log.csv")
    save_policy(Uniform(3, 3), tmp_path / "ml.json")
    code, msg = run(capsys, ["aps", "--data", str(tmp_path / "log.csv"), "--ml", str(tmp_path / "ml.json"),
                             *SCHEMA_FLAGS, "--seed", "0", "--out-dir", str(tmp_path / "o")])
    assert code == 3 and msg["error"] == "DimensionMismatch"
