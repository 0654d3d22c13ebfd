"""Synthetic cohorts with planted effects, and brute-force reference oracles."""

from .generator import (
    PRESETS,
    Cohort,
    CohortConfig,
    CohortConfigError,
    GroundTruth,
    TruthRecord,
    cohort_observations,
    generate_cohort,
    load_config,
    null_effect,
    parse_config,
    severity_noise,
    strong_effect,
    write_cohort,
)
from .oracles import OracleGuardError, oracle_auc, oracle_features, oracle_logistic, random_guarded_trace
