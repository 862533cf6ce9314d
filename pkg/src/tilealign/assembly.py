"""Sparse least-squares assembly.

Each point-pair ``(p, q)`` between tiles ``P`` and ``Q`` contributes a u-row
and a v-row to ``A``::

    [ ... +basis(p) in P's u-columns ... -basis(q) in Q's u-columns ... ]
    [ ... +basis(p) in P's v-columns ... -basis(q) in Q's v-columns ... ]

Rows are grouped per tile pair: all u-rows of the pair, then all v-rows.
For every model except translation the right-hand side is zero; the
translation model carries the point offsets ``q - p`` in ``b``.
"""
from __future__ import annotations

import hashlib
import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import DanglingReference, EmptySystem, SingularSystem
from .model import ModelKind, TileSpec, TransformParams, basis_matrix, unpack

logger = logging.getLogger(__name__)

__all__ = [
    "MatchSet",
    "SparseSystem",
    "NormalSystem",
    "ConnectivityReport",
    "merge_matches",
    "validate_connectivity",
    "build_system",
    "assemble",
    "fix_tiles",
    "gram",
    "build_normal_equations",
]


@dataclass(frozen=True, eq=False)
class MatchSet:
    """Point correspondences between two tiles; ``p[i]`` in ``p_tile`` matches
    ``q[i]`` in ``q_tile``."""

    p_tile: str
    q_tile: str
    p: np.ndarray
    q: np.ndarray
    w: np.ndarray = None

    def __post_init__(self):
        p = np.array(self.p, dtype=float).reshape(-1, 2)
        q = np.array(self.q, dtype=float).reshape(-1, 2)
        w = np.ones(len(p)) if self.w is None else np.array(self.w, dtype=float).reshape(-1)
        if self.p_tile == self.q_tile:
            raise ValueError(f"match set links tile {self.p_tile!r} to itself")
        if not (len(p) == len(q) == len(w)):
            raise ValueError(
                f"pair ({self.p_tile}, {self.q_tile}): p, q, w lengths differ "
                f"({len(p)}, {len(q)}, {len(w)})"
            )
        if len(p) == 0:
            raise ValueError(f"pair ({self.p_tile}, {self.q_tile}) has no points")
        if np.any(w < 0):
            raise ValueError(f"pair ({self.p_tile}, {self.q_tile}): negative weight")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise ValueError(f"pair ({self.p_tile}, {self.q_tile}): non-finite point")
        for arr in (p, q, w):
            arr.flags.writeable = False
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "w", w)

    @property
    def n(self) -> int:
        return len(self.p)

    @property
    def key(self) -> tuple[str, str]:
        return (self.p_tile, self.q_tile)

    def swapped(self) -> MatchSet:
        return MatchSet(self.q_tile, self.p_tile, self.q, self.p, self.w)

    def __eq__(self, other):
        if not isinstance(other, MatchSet):
            return NotImplemented
        return (self.key == other.key and np.array_equal(self.p, other.p)
                and np.array_equal(self.q, other.q) and np.array_equal(self.w, other.w))

    def __hash__(self):
        return hash(self.key)


@dataclass(frozen=True, eq=False)
class SparseSystem:
    """Assembled ``A``, ``D`` (diagonal, as a vector) and ``b``.

    ``tile_order`` lists the tiles owning columns; tiles eliminated with
    :func:`fix_tiles` live in ``fixed``. ``pairs`` holds the match sets that
    produced the rows, in row order, and ``row_offsets[j]`` the first row of
    pair ``j``.
    """

    A: sp.csr_matrix
    D: np.ndarray
    b: np.ndarray
    tile_order: tuple
    kind: ModelKind
    pairs: tuple
    row_offsets: np.ndarray
    fixed: dict = field(default_factory=dict)
    rows_per_point: int = 2

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def nnz(self) -> int:
        return self.A.nnz

    @property
    def n_point_matches(self) -> int:
        return int(sum(ms.n for ms in self.pairs))

    def tile_index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tile_order)}

    def residuals(self, x) -> np.ndarray:
        return self.A @ np.asarray(x, dtype=float) - self.b


@dataclass(frozen=True, eq=False)
class NormalSystem:
    """``A~ x = b~``. ``gradient(x)``, when present, evaluates ``b~ - A~ x``
    from the unsquared factors, which is more accurate than forming it
    from ``A~`` when the system is ill-conditioned."""

    A_tilde: sp.csr_matrix
    b_tilde: np.ndarray
    gradient: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.A_tilde.shape[0]


@dataclass
class ConnectivityReport:
    components: list
    orphans: list
    pair_counts: dict

    @property
    def n_components(self) -> int:
        return len(self.components)


def merge_matches(matches) -> list[MatchSet]:
    """Merge match sets that share an unordered tile pair.

    The merged set is oriented with ``p_tile < q_tile`` and the result is
    sorted by pair key, so input order only affects the point order inside
    merged duplicates.
    """
    merged: dict[tuple[str, str], list[MatchSet]] = {}
    for ms in matches:
        if ms.p_tile > ms.q_tile:
            ms = ms.swapped()
        merged.setdefault(ms.key, []).append(ms)
    out = []
    for key in sorted(merged):
        group = merged[key]
        if len(group) == 1:
            out.append(group[0])
        else:
            out.append(MatchSet(
                key[0], key[1],
                np.concatenate([g.p for g in group]),
                np.concatenate([g.q for g in group]),
                np.concatenate([g.w for g in group]),
            ))
    return out


def validate_connectivity(tiles, matches) -> ConnectivityReport:
    ids = sorted(t.tile_id for t in tiles)
    index = {tid: i for i, tid in enumerate(ids)}
    counts: dict[tuple[str, str], int] = {}
    for ms in matches:
        for tid in ms.key:
            if tid not in index:
                raise DanglingReference(tid)
        key = tuple(sorted(ms.key))
        counts[key] = counts.get(key, 0) + ms.n
    linked = {tid for key in counts for tid in key}
    orphans = [tid for tid in ids if tid not in linked]
    active = [tid for tid in ids if tid in linked]
    if not active:
        raise EmptySystem("no tile has any point-matches")
    sub = {tid: i for i, tid in enumerate(active)}
    if counts:
        r = np.array([sub[a] for a, _ in counts])
        c = np.array([sub[b] for _, b in counts])
        graph = sp.coo_matrix((np.ones(len(r)), (r, c)), shape=(len(active),) * 2)
        _, labels = connected_components(graph, directed=False)
    else:
        labels = np.zeros(len(active), dtype=int)
    groups: dict[int, list[str]] = {}
    for tid, lab in zip(active, labels):
        groups.setdefault(int(lab), []).append(tid)
    components = sorted(groups.values(), key=lambda g: g[0])
    return ConnectivityReport(components, orphans, dict(sorted(counts.items())))


def _point_keys(ms: MatchSet) -> np.ndarray:
    keys = np.empty(ms.n, dtype=np.uint64)
    for i in range(ms.n):
        h = hashlib.blake2b(f"{ms.p_tile}\0{ms.q_tile}\0{i}".encode(), digest_size=8)
        keys[i] = int.from_bytes(h.digest(), "little")
    return keys


def subsample(ms: MatchSet, max_matches: int) -> MatchSet:
    """Keep ``max_matches`` points chosen by a stable hash of (pair, index)."""
    if ms.n <= max_matches:
        return ms
    keep = np.sort(np.argsort(_point_keys(ms), kind="stable")[:max_matches])
    return MatchSet(ms.p_tile, ms.q_tile, ms.p[keep], ms.q[keep], ms.w[keep])


def filter_matches(matches, min_matches: int = 1, max_matches: int | None = None):
    kept = []
    for ms in merge_matches(matches):
        if ms.n < min_matches:
            logger.warning("dropping pair %s-%s: %d matches < min %d",
                           ms.p_tile, ms.q_tile, ms.n, min_matches)
            continue
        if max_matches is not None:
            ms = subsample(ms, max_matches)
        kept.append(ms)
    return kept


def build_system(tiles, matches, kind: ModelKind, min_matches: int = 1,
                 max_matches: int | None = None) -> SparseSystem:
    """Filter the matches and assemble ``A``, ``D`` and ``b``.

    Orphan tiles (no surviving matches) get no columns. Disconnected
    components are allowed but logged, since only regularization or fixed
    tiles make such a system solvable.
    """
    kind = ModelKind.parse(kind)
    pairs = filter_matches(matches, min_matches, max_matches)
    if not pairs:
        raise EmptySystem("no tile pair survived match filtering")
    report = validate_connectivity(tiles, pairs)
    if report.orphans:
        logger.info("%d orphan tiles excluded from assembly", len(report.orphans))
    if report.n_components > 1:
        logger.warning("tile graph has %d connected components", report.n_components)
    order = [tid for comp in report.components for tid in comp]
    return assemble(pairs, sorted(order), kind)


def assemble(pairs, tile_order, kind: ModelKind, rows_per_point: int = 2) -> SparseSystem:
    """Vectorized assembly of already-filtered pairs over the given columns."""
    kind = ModelKind.parse(kind)
    pairs = tuple(pairs)
    tile_order = tuple(tile_order)
    if not pairs:
        raise EmptySystem("no point-match pairs to assemble")
    index = {tid: i for i, tid in enumerate(tile_order)}
    nb, nc = kind.n_basis, kind.n_coeffs

    n_j = np.array([ms.n for ms in pairs])
    row_offsets = np.concatenate([[0], np.cumsum(2 * n_j)[:-1]])
    P = np.concatenate([ms.p for ms in pairs])
    Q = np.concatenate([ms.q for ms in pairs])
    W = np.concatenate([ms.w for ms in pairs])
    try:
        p_col = np.repeat([index[ms.p_tile] * nc for ms in pairs], n_j)
        q_col = np.repeat([index[ms.q_tile] * nc for ms in pairs], n_j)
    except KeyError as exc:
        raise DanglingReference(exc.args[0], "not in tile order") from None
    local = np.arange(len(P)) - np.repeat(np.cumsum(n_j) - n_j, n_j)
    u_row = np.repeat(row_offsets, n_j) + local
    v_row = u_row + np.repeat(n_j, n_j)

    Bp = basis_matrix(kind, P)
    Bq = basis_matrix(kind, Q)
    k = np.arange(nb)
    rows = np.concatenate([
        np.repeat(u_row, nb), np.repeat(u_row, nb),
        np.repeat(v_row, nb), np.repeat(v_row, nb),
    ])
    cols = np.concatenate([
        (p_col[:, None] + k).ravel(), (q_col[:, None] + k).ravel(),
        (p_col[:, None] + nb + k).ravel(), (q_col[:, None] + nb + k).ravel(),
    ])
    vals = np.concatenate([Bp.ravel(), -Bq.ravel(), Bp.ravel(), -Bq.ravel()])
    m = int(2 * n_j.sum())
    n = nc * len(tile_order)
    A = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))
    A.sort_indices()

    D = np.empty(m)
    D[u_row] = W
    D[v_row] = W
    b = np.zeros(m)
    if kind is ModelKind.TRANSLATION:
        # (p + t_p) - (q + t_q) = 0  ->  t_p - t_q = q - p
        b[u_row] = Q[:, 0] - P[:, 0]
        b[v_row] = Q[:, 1] - P[:, 1]
    return SparseSystem(A, D, b, tile_order, kind, pairs, row_offsets,
                        rows_per_point=rows_per_point)


def fix_tiles(system: SparseSystem, fixed: dict) -> SparseSystem:
    """Eliminate the columns of ``fixed`` tiles, moving their known
    contribution to the right-hand side so residuals are unchanged."""
    if not fixed:
        return system
    index = system.tile_index()
    for tid in fixed:
        if tid not in index:
            raise KeyError(f"cannot fix unknown tile {tid!r}")
    if len(fixed) >= len(system.tile_order):
        raise ValueError("cannot fix every tile; nothing left to solve")
    nc = system.kind.n_coeffs
    fixed_cols, fixed_vals = [], []
    for tid in sorted(fixed, key=index.get):
        i = index[tid]
        fixed_cols.extend(range(i * nc, (i + 1) * nc))
        fixed_vals.append(fixed[tid].convert(system.kind).coeffs)
    fixed_cols = np.array(fixed_cols)
    keep = np.setdiff1d(np.arange(system.n), fixed_cols)
    A = system.A.tocsc()
    b = system.b - A[:, fixed_cols] @ np.concatenate(fixed_vals)
    A_free = A[:, keep].tocsr()
    A_free.sort_indices()
    order = tuple(t for t in system.tile_order if t not in fixed)
    all_fixed = dict(system.fixed)
    all_fixed.update({t: fixed[t].convert(system.kind) for t in fixed})
    return SparseSystem(A_free, system.D, b, order, system.kind, system.pairs,
                        system.row_offsets, all_fixed, system.rows_per_point)


def gram(system: SparseSystem):
    """``(A^T D A, A^T D b)``; the lambda-independent part of the normal equations."""
    A = system.A
    DA = sp.diags(system.D) @ A
    G = (A.T @ DA).tocsr()
    G = ((G + G.T) * 0.5).tocsr()
    G.sort_indices()
    return G, A.T @ (system.D * system.b)


def build_normal_equations(system: SparseSystem, lam, B=None, d=None, *,
                           gram_parts=None) -> NormalSystem:
    """Form ``A~ = A^T D A + diag(lam B^2)`` and ``b~ = A^T D b + lam B d``.

    ``gram_parts`` lets a caller reuse a precomputed :func:`gram` result.
    """
    n = system.n
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (n,))
    B = np.ones(n) if B is None else np.broadcast_to(np.asarray(B, dtype=float), (n,))
    d = np.zeros(n) if d is None else np.asarray(d, dtype=float)
    if d.shape != (n,):
        raise ValueError(f"prior vector has length {d.size}, expected {n}")
    if np.any(lam < 0):
        raise ValueError("lambda entries must be non-negative")
    G, g = gram(system) if gram_parts is None else gram_parts
    reg = lam * B * B
    if not np.any(reg > 0) and not system.fixed:
        raise SingularSystem(
            "no regularization and no fixed tile: the solution is only defined "
            "up to a global transform (gauge freedom)"
        )
    A_tilde = (G + sp.diags(reg)).tocsr()
    A_tilde.sort_indices()
    diag = A_tilde.diagonal()
    zero = np.flatnonzero(diag == 0)
    if zero.size:
        raise SingularSystem(f"{zero.size} zero rows/columns in the normal matrix "
                             f"(first at column {zero[0]})")
    A, Dw, b = system.A, system.D, system.b
    lam, B = lam.copy(), B.copy()

    def gradient(x):
        return A.T @ (Dw * (b - A @ x)) + lam * B * (d - B * x)

    return NormalSystem(A_tilde, g + lam * B * d, gradient)


def tile_transforms(system: SparseSystem, x) -> dict[str, TransformParams]:
    """Per-tile transforms for a solution vector, including fixed tiles."""

    out = unpack(x, system.tile_order, system.kind)
    out.update(system.fixed)
    return dict(sorted(out.items()))


def tile_specs_in_order(tiles, order) -> list[TileSpec]:
    by_id = {t.tile_id: t for t in tiles}
    return [by_id[t] for t in order]
