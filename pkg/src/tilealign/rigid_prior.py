"""Rigid-model approximation used as the regularization target.

Pipeline:

1. center every pair's point sets on their centroids;
2. solve a linear 4-coefficient system over all tiles whose rows are the
   centered matches plus copies of them rotated by 90 degrees, which pulls
   each tile's 2x2 block toward a similarity; the anchor tile (lowest
   ``tile_id``) is fixed to the identity;
3. divide each block by ``sqrt(|det|)`` so every tile keeps its area;
4. with the blocks held fixed, solve the translation-only least-squares
   problem, anchor translation pinned to zero;
5. pack ``(m1, m2, t1, m3, m4, t2)`` per tile into the prior vector.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .assembly import (MatchSet, SparseSystem, assemble, build_normal_equations,
                       filter_matches, fix_tiles, validate_connectivity)
from .errors import DegenerateBlock, EmptySystem
from .model import ModelKind, TransformParams
from .regularize import LambdaSpec, expand_lambda
from .solvers import solve_direct

logger = logging.getLogger(__name__)

MIN_ABS_DET = 1e-14


@dataclass(frozen=True)
class CenteredPair:
    matches: MatchSet
    p_centroid: np.ndarray
    q_centroid: np.ndarray


@dataclass
class RigidApproxSolution:
    """Per-tile rotation-like blocks and translations, keyed by tile_id."""

    rotations: dict
    translations: dict
    scale_removed: dict
    anchor: str
    degenerate: list = field(default_factory=list)
    similarity_defect: dict = field(default_factory=dict)

    @property
    def tile_order(self) -> list[str]:
        return sorted(self.rotations)

    def transform(self, tile_id: str) -> TransformParams:
        m = self.rotations[tile_id]
        t = self.translations[tile_id]
        return TransformParams.from_affine(m[0, 0], m[0, 1], t[0], m[1, 0], m[1, 1], t[1])

    def transforms(self) -> dict[str, TransformParams]:
        return {tid: self.transform(tid) for tid in self.tile_order}

    def angle(self, tile_id: str) -> float:
        m = self.rotations[tile_id]
        return math.atan2(m[1, 0] - m[0, 1], m[0, 0] + m[1, 1])


@dataclass(frozen=True, eq=False)
class PriorVector:
    d: np.ndarray
    B_diag: np.ndarray
    lambda_diag: np.ndarray
    tile_order: tuple = ()
    kind: ModelKind = ModelKind.AFFINE


def center_matches(matches) -> list[CenteredPair]:
    out = []
    for ms in matches:
        if ms.n < 2:
            logger.warning("pair %s-%s has %d match; dropped from the rigid prior",
                           ms.p_tile, ms.q_tile, ms.n)
            continue
        cp = ms.p.mean(axis=0)
        cq = ms.q.mean(axis=0)
        out.append(CenteredPair(MatchSet(ms.p_tile, ms.q_tile, ms.p - cp, ms.q - cq, ms.w),
                                cp, cq))
    return out


def _similarity_rows(pairs, tile_order):
    """Row layout per pair (n points): u-original, u-rotated, v-original,
    v-rotated, n rows each. Rotated rows use ``(x, y) -> (y, -x)``."""
    index = {tid: i for i, tid in enumerate(tile_order)}
    rows, cols, vals, weights = [], [], [], []
    offsets = []
    r0 = 0
    for ms in pairs:
        n = ms.n
        offsets.append(r0)
        pc = index[ms.p_tile] * 4
        qc = index[ms.q_tile] * 4
        p, q = ms.p, ms.q
        p_rot = np.column_stack([p[:, 1], -p[:, 0]])
        q_rot = np.column_stack([q[:, 1], -q[:, 0]])
        for block, (bp, bq, group) in enumerate(
                [(p, q, 0), (p_rot, q_rot, 0), (p, q, 2), (p_rot, q_rot, 2)]):
            r = r0 + block * n + np.arange(n)
            for k in range(2):
                rows += [r, r]
                cols += [np.full(n, pc + group + k), np.full(n, qc + group + k)]
                vals += [bp[:, k], -bq[:, k]]
            weights.append(ms.w)
        r0 += 4 * n
    m = r0
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(m, 4 * len(tile_order)))
    A.sort_indices()
    return A, np.concatenate(weights), np.array(offsets)


def build_similarity_system(centered, tiles=None) -> SparseSystem:
    """Similarity-augmented system over all tiles, anchor (lowest tile_id)
    fixed to the identity block."""
    pairs = [c.matches if isinstance(c, CenteredPair) else c for c in centered]
    if not pairs:
        raise EmptySystem("no pair with at least 2 matches for the rigid prior")
    linked = sorted({tid for ms in pairs for tid in ms.key})
    if tiles is not None:
        known = {t.tile_id for t in tiles}
        linked = [t for t in linked if t in known]
    A, D, offsets = _similarity_rows(pairs, linked)
    full = SparseSystem(A, D, np.zeros(A.shape[0]), tuple(linked), ModelKind.RIGID_APPROX,
                        tuple(pairs), offsets, rows_per_point=4)
    anchor = linked[0]
    return fix_tiles(full, {anchor: TransformParams.identity(ModelKind.RIGID_APPROX)})


def rescale_to_unit_area(blocks: dict) -> tuple[dict, dict, list]:
    """Divide every 2x2 block by ``sqrt(|det|)``.

    Returns ``(rescaled, scale_removed, degenerate)``; degenerate tiles get
    the identity block and a scale of 1.
    """
    rescaled, scale, degenerate = {}, {}, []
    for tid in sorted(blocks):
        m = np.asarray(blocks[tid], dtype=float)
        det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
        if not np.isfinite(det) or abs(det) < MIN_ABS_DET:
            logger.warning("%s", DegenerateBlock(f"tile {tid}: |det| = {abs(det):.3g}; "
                                                 "using identity rotation"))
            rescaled[tid] = np.eye(2)
            scale[tid] = 1.0
            degenerate.append(tid)
            continue
        s = math.sqrt(abs(det))
        rescaled[tid] = m / s
        scale[tid] = s
    return rescaled, scale, degenerate


def solve_similarity(centered, tiles=None) -> dict:
    """Un-rescaled 2x2 blocks for every linked tile."""
    system = build_similarity_system(centered, tiles)
    ns = build_normal_equations(system, 0.0)
    rep = solve_direct(ns)
    blocks = {}
    for i, tid in enumerate(system.tile_order):
        c = rep.x[4 * i:4 * i + 4]
        blocks[tid] = np.array([[c[0], c[1]], [c[2], c[3]]])
    for tid, t in system.fixed.items():
        blocks[tid] = t.linear_part()
    return dict(sorted(blocks.items()))


def solve_translations(tiles, matches, rotations, anchor: str | None = None) -> dict:
    """Least-squares translations with the given 2x2 blocks held fixed.

    Minimizes ``sum ||(M_p p + t_p) - (M_q q + t_q)||^2`` with the anchor's
    translation pinned to zero.
    """
    order = sorted(rotations)
    anchor = order[0] if anchor is None else anchor
    rotated = [
        MatchSet(ms.p_tile, ms.q_tile, ms.p @ rotations[ms.p_tile].T,
                 ms.q @ rotations[ms.q_tile].T, ms.w)
        for ms in matches
        if ms.p_tile in rotations and ms.q_tile in rotations
    ]
    system = assemble(rotated, order, ModelKind.TRANSLATION)
    system = fix_tiles(system, {anchor: TransformParams.identity(ModelKind.TRANSLATION)})
    rep = solve_direct(build_normal_equations(system, 0.0))
    out = {anchor: np.zeros(2)}
    for i, tid in enumerate(system.tile_order):
        out[tid] = rep.x[2 * i:2 * i + 2].copy()
    return dict(sorted(out.items()))


def estimate_rigid_prior(tiles, matches, min_matches: int = 2,
                         max_matches: int | None = None) -> RigidApproxSolution:
    pairs = filter_matches(matches, max(min_matches, 2), max_matches)
    report = validate_connectivity(tiles, pairs)
    if report.n_components > 1:
        logger.warning("rigid prior over %d disconnected components; only the anchor's "
                       "component is pinned", report.n_components)
    centered = center_matches(pairs)
    raw = solve_similarity(centered, tiles)
    anchor = min(raw)
    rotations, scale, degenerate = rescale_to_unit_area(raw)
    defect = {tid: float((abs(m[0, 0] - m[1, 1]) + abs(m[0, 1] + m[1, 0]))
                         / max(np.linalg.norm(m), 1e-300))
              for tid, m in raw.items()}
    translations = solve_translations(tiles, pairs, rotations, anchor)
    return RigidApproxSolution(rotations, translations, scale, anchor, degenerate, defect)


def assemble_prior(rigid, tiles, kind: ModelKind, lambda_spec: LambdaSpec | float = 1.0,
                   B=None) -> PriorVector:
    """Pack a per-tile prior (rigid solution or ``tile_id -> TransformParams``
    mapping) into ``d`` for ``tiles`` (in column order) under ``kind``."""
    kind = ModelKind.parse(kind)
    if not isinstance(lambda_spec, LambdaSpec):
        lambda_spec = LambdaSpec(float(lambda_spec))
    transforms = rigid.transforms() if isinstance(rigid, RigidApproxSolution) else rigid
    missing = [t.tile_id for t in tiles if t.tile_id not in transforms]
    if missing:
        raise KeyError(f"prior does not cover {len(missing)} tiles, e.g. {missing[0]!r}")
    d = np.concatenate([transforms[t.tile_id].convert(kind).coeffs for t in tiles])
    lam = expand_lambda(lambda_spec, tiles, kind)
    B = np.ones(d.size) if B is None else np.broadcast_to(np.asarray(B, float), d.shape).copy()
    return PriorVector(d, B, lam, tuple(t.tile_id for t in tiles), kind)
