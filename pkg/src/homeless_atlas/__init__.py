"""Toolkit for metro-level homelessness analysis.

Areal interpolation of homelessness counts onto metro areas, long-differenced
panels with piecewise rent effects, clustered OLS, quasi-differenced GMM,
shift-share IV and a simulator of the minimum-quality rental market.
"""

__version__ = "0.1.0"

from ._validation import ConfigurationError, RankDeficiencyError
from .geo import PointSet, RegionPolygon, RegionSet, assign_points, read_geojson, read_points_csv
from .interpolate import PopulationWeightedInterpolator, interpolate_counts
from .market import MarketConfig, SupplyCurve, UtilityParams, simulate
from .ols import ClusteredOLS, EstimateReport, equal_slopes_test, wald_test
from .panel import SpecConfig, build_panel, design_matrix
from .presets import PRESETS, get_preset
from .qdgmm import QuasiDifferencedGMM, fit_qd
from .shiftshare import TwoStageLeastSquares, fit_iv

__all__ = [
    "__version__", "ConfigurationError", "RankDeficiencyError",
    "PointSet", "RegionPolygon", "RegionSet", "assign_points", "read_geojson", "read_points_csv",
    "PopulationWeightedInterpolator", "interpolate_counts",
    "MarketConfig", "SupplyCurve", "UtilityParams", "simulate",
    "ClusteredOLS", "EstimateReport", "equal_slopes_test", "wald_test",
    "SpecConfig", "build_panel", "design_matrix", "PRESETS", "get_preset",
    "QuasiDifferencedGMM", "fit_qd", "TwoStageLeastSquares", "fit_iv",
]
