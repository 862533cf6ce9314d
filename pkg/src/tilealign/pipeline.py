"""End-to-end solve: assemble, build the prior, regularize, solve, report."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

from .assembly import (SparseSystem, build_normal_equations, build_system, fix_tiles,
                       tile_specs_in_order, tile_transforms)
from .model import ModelKind, TransformParams
from .regularize import LambdaSpec, deformation_ratio
from .rigid_prior import PriorVector, RigidApproxSolution, assemble_prior, estimate_rigid_prior
from .solvers import ResidualStats, SolveReport, SolverConfig, residual_stats, solve

logger = logging.getLogger(__name__)


@dataclass
class Solution:
    transforms: dict
    report: SolveReport
    system: SparseSystem
    prior: PriorVector | None
    residuals: ResidualStats
    rigid: RigidApproxSolution | None = None

    def metrics(self) -> dict:
        m = self.report.metrics()
        m["mean_residual_px"] = self.residuals.global_mean
        m["point_matches"] = self.system.n_point_matches
        m["tiles"] = len(self.transforms)
        return m


def build_prior(tiles, matches, system: SparseSystem, kind: ModelKind, lambda_spec,
                prior="rigid", min_matches=1, max_matches=None):
    """``prior`` is ``"rigid"``, ``None`` (zero prior) or a mapping of
    tile_id to TransformParams."""
    ordered = tile_specs_in_order(tiles, system.tile_order)
    rigid = None
    if isinstance(prior, str):
        if prior != "rigid":
            raise ValueError(f"unknown prior source {prior!r}")
        rigid = estimate_rigid_prior(tiles, matches, max(min_matches, 2), max_matches)
        source = rigid
    elif prior is None:
        source = {t.tile_id: TransformParams.identity(kind) for t in ordered}
    else:
        source = prior
    return assemble_prior(source, ordered, kind, lambda_spec), rigid


def solve_dataset(tiles, matches, kind="affine", lambda_spec: LambdaSpec | float = 1.0,
                  config: SolverConfig | None = None, prior="rigid", fixed=None,
                  min_matches: int = 1, max_matches: int | None = None) -> Solution:
    """Solve a whole dataset.

    ``fixed`` maps tile_id to TransformParams for tiles whose columns are
    eliminated; when given with ``lambda_spec == 0`` the unregularized system
    is solved.
    """
    kind = ModelKind.parse(kind)
    if not isinstance(lambda_spec, LambdaSpec):
        lambda_spec = LambdaSpec(float(lambda_spec))
    t0 = time.perf_counter()
    system = build_system(tiles, matches, kind, min_matches, max_matches)
    pv, rigid = None, None
    if lambda_spec.default > 0 or lambda_spec.per_class or lambda_spec.per_section \
            or lambda_spec.per_tile:
        pv, rigid = build_prior(tiles, matches, system, kind, lambda_spec, prior,
                                min_matches, max_matches)
    if fixed:
        if pv is not None:
            keep = [i for i, tid in enumerate(system.tile_order) if tid not in fixed]
            nc = kind.n_coeffs
            cols = [i * nc + k for i in keep for k in range(nc)]
            pv = PriorVector(pv.d[cols], pv.B_diag[cols], pv.lambda_diag[cols],
                             tuple(system.tile_order[i] for i in keep), kind)
        system = fix_tiles(system, fixed)
    if pv is None:
        ns = build_normal_equations(system, 0.0)
    else:
        ns = build_normal_equations(system, pv.lambda_diag, pv.B_diag, pv.d)
    assembly_seconds = time.perf_counter() - t0
    report = solve(ns, config)
    report.assembly_seconds = assembly_seconds
    report.nnz = system.nnz  # nnz(A), not of the normal matrix
    transforms = tile_transforms(system, report.x)
    return Solution(transforms, report, system, pv, residual_stats(system, report.x), rigid)


def section_deformation(tiles, transforms) -> dict:
    """Mean deformation ratio per section z."""
    by_z: dict[int, list] = {}
    for t in tiles:
        if t.tile_id in transforms:
            by_z.setdefault(t.z, []).append(t)
    out = {}
    for z, group in sorted(by_z.items()):
        kind = transforms[group[0].tile_id].kind
        out[z] = deformation_ratio(group, {t.tile_id: transforms[t.tile_id] for t in group},
                                   kind).mean
    return out
