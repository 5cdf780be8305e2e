"""Adaptive hybridized discontinuous Galerkin solver for
convection-diffusion, with discrete-adjoint error estimation and
goal-driven mesh refinement."""

from . import adapt, adjoint, assembly, cli, fespace, law, mesh, solver

__version__ = "0.1.0"

__all__ = ["mesh", "fespace", "law", "assembly", "solver", "adjoint",
           "adapt", "cli", "__version__"]
