"""Adaptive TMLE for augmenting a randomized trial with external data,
with an outcome-blind two-stage matching design for selecting external
patients.
"""

from __future__ import annotations

from .core import (
    Cohort,
    CohortError,
    Estimate,
    Observation,
    PositivityError,
    PreconditionError,
    from_arrays,
    split_by_study,
    validate_cohort,
    wald_inference,
)
from .estimators import (
    ATMLEOptions,
    ATMLEResult,
    aipw_from_cohort,
    estimate_aipw,
    estimate_atmle,
    estimate_bias_projection,
    estimate_pooled_projection,
    estimate_tmle_rct,
)
from .matching import (
    MatchResult,
    MatchSpec,
    apply_eligibility_filter,
    match_propensity,
    match_trial_enrollment,
    sample_random,
    trim_to_size,
    two_stage_match,
)
from .nuisance import (
    BasisSpec,
    LassoConfig,
    NuisanceBundle,
    NuisanceOptions,
    build_nuisance_bundle,
    compose_scores,
    expand_basis,
    fit_logistic,
    fit_theta,
    fit_weighted_lasso,
)
from .simulation import DGPConfig, ExperimentConfig, MetricsRow, generate_pool, run_experiment

__all__ = [name for name in dir() if not name.startswith("_")]
