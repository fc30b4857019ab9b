"""Estimation, testing and simulation for the log-SHE spatial variance model."""

__version__ = "0.1.0"

from .effects import EffectTriple, effects_table, mean_effects, variance_effects, write_effects_csv
from .errors import *  # noqa: F401,F403
from .gmm import GMMFit, MomentSystem, default_instruments, fit_gmm, fit_ogmm, moment_jacobian, moment_vector, \
    omega_sigma_R
from .inference import Constraint, TestResult, constrained_ogmm, d_test, j_test, lm_test, parse_constraint, \
    wald_test
from .ml import MLFit, fit_2sml, fit_ml, hessian, log_likelihood, score
from .model import Dataset, ErrorDistribution, LogSheModel, Theta, durbin_design, h_vector, simulate, \
    simulate_alternative, v2_vector
from .moments import GAUSSIAN_MOMENTS, MomentSet, estimate_moments
from .operators import Kind, OperatorFamily
from .results import FitResult
from .weights import WeightMatrix, build_knn, build_rook, read_coordinates, rho_interval, row_standardize, \
    validate_assumptions
