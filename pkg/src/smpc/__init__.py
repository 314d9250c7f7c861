"""Stochastic MPC with constraint tightening, a zero-input back-up and ISSp checks."""

from smpc.model import LtiSystem, NoiseModel, Polytope
from smpc.mpc import CostSpec, assemble, solve_mpc, value_function
from smpc.policy import combined_policy, in_feasible_set, lyapunov_candidate

__version__ = "0.1.0"

__all__ = [
    "CostSpec",
    "LtiSystem",
    "NoiseModel",
    "Polytope",
    "assemble",
    "combined_policy",
    "in_feasible_set",
    "lyapunov_candidate",
    "solve_mpc",
    "value_function",
]
