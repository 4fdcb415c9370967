"""Off-policy evaluation with approximate propensity scores."""

__version__ = "0.1.0"

from .aps import ApsTable, BallSampler, compute_aps, k_profile, sample_uniform_ball
from .core import ContextMatrix, CsvSchema, LogDataset, RngPlan, as_dataset, load_csv, normalize_contexts, write_csv
from .estimator import (
    EffectResolution,
    PairwiseFit,
    ValueEstimate,
    baseline_direct_method,
    baseline_mean_difference,
    effect_ratio,
    estimate_value,
    fit_pairwise,
    resolve_effects,
)
from .policy import (
    LinearGreedy,
    Policy,
    QuantileGate,
    ScoreThreshold,
    TableLookup,
    UcbTable,
    Uniform,
    load_policy,
    policy_from_dict,
    save_policy,
)
from .api import ApsOffPolicyEvaluator, ApsTransformer, ContextScaler
