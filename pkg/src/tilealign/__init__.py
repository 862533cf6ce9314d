"""Joint registration of overlapping image tiles by regularized sparse least squares."""
from .model import ModelKind, TileSpec, TransformParams, apply_transform
from .assembly import MatchSet, build_system, build_normal_equations, fix_tiles
from .rigid_prior import estimate_rigid_prior, assemble_prior
from .regularize import LambdaSpec
from .solvers import SolverConfig, solve, residual_stats
from .pipeline import solve_dataset

__version__ = "0.1.0"

__all__ = [
    "ModelKind", "TileSpec", "TransformParams", "apply_transform",
    "MatchSet", "build_system", "build_normal_equations", "fix_tiles",
    "estimate_rigid_prior", "assemble_prior", "LambdaSpec",
    "SolverConfig", "solve", "residual_stats", "solve_dataset",
]
