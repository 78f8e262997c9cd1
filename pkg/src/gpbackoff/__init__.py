"""Back-off Gaussian-process NMPC for chance-constrained batch processes."""

from .backoff import (BackoffRunReport, BackoffTable, ChanceConfig, clopper_lower, ecdf_joint, initial_backoffs,
                      joint_satisfaction_stat, run_backoff_iterations)
from .gp import GPModel, Hyperparameters, condition, fit_hyperparameters, posterior
from .nmpc import OCPSpec, PolicyState, make_policy_state, policy_kappa, solve_ocp
from .numerics import RngStream, betainv, sobol
from .statespace import GPStateSpace, fit_state_space, nominal_trajectory, predict, sample_trajectory

__version__ = "0.1.0"
