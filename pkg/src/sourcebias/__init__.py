"""Limiting beliefs of a Bayesian learner with dogmatic, wrong beliefs about some source biases."""

from .errors import (
    BudgetExceeded, DegenerateMetric, InternalConsistencyError, InvalidPortfolio, NotSpd,
    SingularBlock, SingularUpdate, SourceBiasError, ValidationError,
)
from .linalg import SymMatrix
from .scenario import Scenario, SignalModel, build_signal_model, load_scenario, validate
from .klsolver import Delta, KlSolution, kl_divergence, solve, solve_general

__version__ = "0.1.0"
