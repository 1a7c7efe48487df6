"""Finite-volume estimates of the bulk diffusion matrix of interacting particles
in a Poisson environment, and of its density expansion."""
__version__ = "0.1.0"

from .engine import MCConfig, Problem, TruncationError
from .fields import ConductanceField, ConstantField, CrowdingField, InvariantViolation, SmoothPairField, make_field
from .pointproc import Box, PointConfiguration, sample_poisson
from .solver import GridSpec, SolverError, UnconvergedError, solve_dual, solve_primal

__all__ = ["MCConfig", "Problem", "TruncationError", "ConductanceField", "ConstantField", "CrowdingField",
           "InvariantViolation", "SmoothPairField", "make_field", "Box", "PointConfiguration",
           "sample_poisson", "GridSpec", "SolverError", "UnconvergedError", "solve_dual", "solve_primal"]
