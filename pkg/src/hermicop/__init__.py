"""Hermite-expansion copulas, their correction, and FX cross-smile calibration."""
from .calibration import backtest, calibrate_smile, recalibrate_rho_to_atm
from .copula_build import HermiteCopula
from .copulas import ClassicalCopula, spearman_to_theta
from .crossfx import CrossPricer, CrossSetup
from .expansion import ExpansionModel, estimate_coefficients, unscale
from .quadrature import CartesianGrid, GridDensity, build_grid
from .smile import SmilePillars, build_curve

__version__ = "0.1.0"

__all__ = [
    "CartesianGrid", "ClassicalCopula", "CrossPricer", "CrossSetup", "ExpansionModel", "GridDensity",
    "HermiteCopula", "SmilePillars", "backtest", "build_curve", "build_grid", "calibrate_smile",
    "estimate_coefficients", "recalibrate_rho_to_atm", "spearman_to_theta", "unscale",
]
