"""Multilevel solvers with guaranteed algebraic error bounds for mixed Darcy problems.

Raviart-Thomas/discontinuous pressure pairs of any degree on triangles, a
multigrid V-cycle and a two-level additive Schwarz method whose step sizes
and correction norms give a computable lower bound on the algebraic error.
"""

from .diagnostics import algebraic_error, reference_solution
from .feasible_init import construct_u0
from .mesh_hierarchy import Mesh, MeshHierarchy, build_initial_mesh, uniform_hierarchy
from .multilevel import MultilevelSystem
from .problems import build_case_hierarchy, get_case
from .solver_dd import DomainDecompositionSolver
from .solver_mg import MultigridSolver, SolverError

__version__ = "0.1.0"

__all__ = [
    "Mesh", "MeshHierarchy", "build_initial_mesh", "uniform_hierarchy",
    "MultilevelSystem", "construct_u0", "MultigridSolver", "DomainDecompositionSolver",
    "SolverError", "reference_solution", "algebraic_error", "get_case",
    "build_case_hierarchy",
]
