"""Joint outlier rectification and estimation with concave transport cost."""

__version__ = "0.1.0"

from .core import CostSpec, transport_cost
from .dual import (
    DualSolution,
    RectifiedDistribution,
    SortedLossProfile,
    build_profile,
    lad_objective,
    mean_objective,
    rectified_distribution,
    solve_dual,
)
from .estimators import (
    FitConfig,
    FitResult,
    RectifiedLADRegressor,
    RectifiedMean,
    fit_generic,
    fit_lad,
    fit_mean,
)

__all__ = [
    "CostSpec", "transport_cost", "DualSolution", "RectifiedDistribution",
    "SortedLossProfile", "build_profile", "lad_objective", "mean_objective",
    "rectified_distribution", "solve_dual", "FitConfig", "FitResult",
    "RectifiedLADRegressor", "RectifiedMean", "fit_generic", "fit_lad", "fit_mean",
]
