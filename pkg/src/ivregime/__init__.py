"""Optimal treatment regimes for censored survival data with a binary instrument."""

__version__ = "0.1.0"

from ivregime.data import Dataset, Regime, Subject, regime_decide, regime_normalize, validate_dataset
from ivregime.estimators import (
    EstimatorKind,
    ValueEstimate,
    drkme_iv,
    iwkme_iv,
    saiwkme,
    siwkme,
)
from ivregime.nuisance import NuisanceSet, fit_nuisances
from ivregime.optimizer import GAConfig, OptimizationResult, optimize

__all__ = [
    "Dataset",
    "EstimatorKind",
    "GAConfig",
    "NuisanceSet",
    "OptimizationResult",
    "Regime",
    "Subject",
    "ValueEstimate",
    "__version__",
    "drkme_iv",
    "fit_nuisances",
    "iwkme_iv",
    "optimize",
    "regime_decide",
    "regime_normalize",
    "saiwkme",
    "siwkme",
    "validate_dataset",
]
