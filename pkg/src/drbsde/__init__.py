"""Backward SDE solvers on simulated Brownian ensembles and the first-order
sensitivity of their values to drift deviations of L-infinity and L2 size."""

from .errors import (AssumptionViolation, DrbsdeError, InvalidArgument, InvalidState, NumericFailure,
                     RegressionFailure)
from .paths import PathEnsemble, TimeGrid, make_grid, simulate_brownian, stochastic_exponential
from .generators import (ControlledCoefficients, GeneratorSpec, constant_coefficients, hamiltonian,
                         linear_generator, robustify, quadratic_robustify, trivial_coefficients,
                         zero_generator)
from .bsde import BasisSpec, BsdeSolution, ObstacleSpec, TerminalSpec, polynomial_basis, solve_bsde
from .rbsde import RbsdeSolution, solve_rbsde
from .sensitivity import (SensitivityReport, dual_curve, dual_sensitivity, fd_sensitivity,
                          sensitivity_l2_control, sensitivity_linf_bsde, sensitivity_linf_control,
                          sensitivity_mixed_l2, sensitivity_mixed_linf, sensitivity_stopping)
from .dualtools import dual_min, slope_at_zero, strong_duality_check
from .oracles import binomial_stopping
from .scenarios import PortfolioConfig, portfolio_scenario, stopping_benchmark

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
