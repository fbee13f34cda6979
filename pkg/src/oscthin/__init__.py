"""Homogenization toolkit for the Neumann p-Laplacian on thin domains
with oscillating upper boundaries: cell problem, effective coefficient,
thin-domain and 1-D limit solves, corrector and convergence studies."""

from .fem import FluxParams
from .geometry import Mesh, ProfileSpec, build_cell_mesh, build_thin_mesh, mesh_area
from .homogenize import CellSolution, effective_coefficient, solve_cell
from .limit1d import Limit1DProblem, solve_homogenized
from .solve import ConstraintSet, SolveOptions, newton_solve
from .study import LoadSpec, PartitionSpec, StudyConfig, StudyReport, run_study

__version__ = "0.1.0"

__all__ = [
    "CellSolution",
    "ConstraintSet",
    "FluxParams",
    "Limit1DProblem",
    "LoadSpec",
    "Mesh",
    "PartitionSpec",
    "ProfileSpec",
    "SolveOptions",
    "StudyConfig",
    "StudyReport",
    "build_cell_mesh",
    "build_thin_mesh",
    "effective_coefficient",
    "mesh_area",
    "newton_solve",
    "run_study",
    "solve_cell",
    "solve_homogenized",
    "__version__",
]
