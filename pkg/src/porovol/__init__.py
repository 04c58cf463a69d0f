"""Finite volume simulator for compressible immiscible two-phase flow in porous media."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0+unknown"

from .fluid import CapillaryModel, FluidModel, PhaseParams, validate_assumptions
from .mesh import (Mesh, build_structured_rect, build_structured_triangular, load_mesh, tag_boundary_segment,
                   validate_admissibility)
from .scheme import Dirichlet, SourceSpec, State, StepProblem, assemble_jacobian, assemble_residual
from .solver import LinearConfig, NewtonConfig, run_transient, solve_step

__all__ = [
    "CapillaryModel", "FluidModel", "PhaseParams", "validate_assumptions",
    "Mesh", "build_structured_rect", "build_structured_triangular", "load_mesh", "tag_boundary_segment",
    "validate_admissibility",
    "Dirichlet", "SourceSpec", "State", "StepProblem", "assemble_jacobian", "assemble_residual",
    "LinearConfig", "NewtonConfig", "run_transient", "solve_step",
]
