"""Sample size re-estimation for multi-treatment crossover trials."""
from .design import (BalanceReport, DesignError, HypothesisSpec, ModelParams, TrialDesign,
                     builtin_design, check_period_balance, williams_square)

__version__ = "0.1.0"

__all__ = ["BalanceReport", "DesignError", "HypothesisSpec", "ModelParams", "TrialDesign",
           "builtin_design", "check_period_balance", "williams_square", "__version__"]
