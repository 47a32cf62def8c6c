"""Five-state covariate-modulated hidden Markov model of sepsis progression."""
from .model import (
    COVARIATES,
    TRANSIENT,
    VITALS,
    Cohort,
    CovariateDomainError,
    Covariates,
    EmissionParams,
    InfeasibleParametersError,
    LatentState,
    ModelParams,
    Outcome,
    PatientEpisode,
    Standardization,
    TransitionParams,
    VitalSigns,
    transition_matrix,
    validate_params,
)
from .simulate import CohortSpec, default_ground_truth, simulate_cohort

__version__ = "0.1.0"

__all__ = [
    "COVARIATES",
    "TRANSIENT",
    "VITALS",
    "Cohort",
    "CohortSpec",
    "CovariateDomainError",
    "Covariates",
    "EmissionParams",
    "InfeasibleParametersError",
    "LatentState",
    "ModelParams",
    "Outcome",
    "PatientEpisode",
    "Standardization",
    "TransitionParams",
    "VitalSigns",
    "default_ground_truth",
    "simulate_cohort",
    "transition_matrix",
    "validate_params",
]
