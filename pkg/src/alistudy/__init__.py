"""Design, conduct and analyze two-phase validation studies of an error-prone
allostatic load index (ALI) against a binary outcome."""

from alistudy.ali import (
    COMPONENTS,
    AliValue,
    StressorProfile,
    ThresholdTable,
    apply_roadmap,
    classify_component,
    compute_ali,
)
from alistudy.data import PhaseOneData, TwoPhaseDataset
from alistudy.designs import DesignSpec, ValidationSelection, allocate_optimal, select_validation
from alistudy.logit import LogitFit, compute_residuals, fit_logistic, odds_ratio_ci
from alistudy.sieve import SieveBasis, build_sieve
from alistudy.smle import SmleFit, SupportGrid, em_fit, profile_se

__version__ = "0.1.0"

__all__ = [
    "COMPONENTS",
    "AliValue",
    "DesignSpec",
    "LogitFit",
    "PhaseOneData",
    "SieveBasis",
    "SmleFit",
    "StressorProfile",
    "SupportGrid",
    "ThresholdTable",
    "TwoPhaseDataset",
    "ValidationSelection",
    "allocate_optimal",
    "apply_roadmap",
    "build_sieve",
    "classify_component",
    "compute_ali",
    "compute_residuals",
    "em_fit",
    "fit_logistic",
    "odds_ratio_ci",
    "profile_se",
    "select_validation",
]
