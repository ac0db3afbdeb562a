"""Conformal prediction intervals that stay valid under covariate shift plus a
bounded shift in the conditional law of the outcome."""

from .conformal import Method, MethodConfig, PredictionInterval, SplitPlan, make_split_plan, run_wrcp
from .debiased import run_dwrcp
from .divergence import CHISQ, KL, TV, FDivergenceSpec, g_inverse, g_value, get_divergence
from .estimators import Learners
from .quantile import ScoreSet, weighted_quantile
from .sensitivity import SensitivityTarget, counterfactual_interval, ite_interval

__all__ = [
    "CHISQ",
    "KL",
    "TV",
    "FDivergenceSpec",
    "Learners",
    "Method",
    "MethodConfig",
    "PredictionInterval",
    "ScoreSet",
    "SensitivityTarget",
    "SplitPlan",
    "counterfactual_interval",
    "g_inverse",
    "g_value",
    "get_divergence",
    "ite_interval",
    "make_split_plan",
    "run_dwrcp",
    "run_wrcp",
    "weighted_quantile",
]
__version__ = "0.1.0"
