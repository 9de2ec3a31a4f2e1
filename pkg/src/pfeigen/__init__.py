"""Particle approximation of principal eigen-quantities of non-negative kernels."""
from .backward import (BackwardSolution, TwistedRow, eval_h, random_semigroup_apply,
                       run_backward, sample_twisted_chain, twisted_row, window_average_h)
from .errors import (ConfigError, DegenerateWeightsError, InvalidArgumentError,
                     InvariantError, ModelEvaluationError, NonConvergenceError,
                     PfEigenError, UnsupportedDiagnosticError)
from .forward import (ForwardTrajectory, log_lambda_average, pathwise_ratio_diagnostic,
                      run_forward)
from .kernel import (Dirac, DominatedKernelModel, EmpiricalMeasure, LogWeightVector,
                     StateSpace, Uniform, categorical_sample, log_sum_exp,
                     normalize_log_weights)
from .models import cir_bellman_model, neutron_model, rare_event_model
from .oracle import (GridEigenSystem, GridOperator, brute_force_deviation_prob,
                     build_grid_operator, deterministic_h_pn, iterate_expectation,
                     met_decay_profile, power_iteration)

__version__ = "0.1.0"
