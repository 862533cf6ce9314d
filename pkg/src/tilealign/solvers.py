"""Solvers for the regularized normal equations and solution quality metrics."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import NormalSystem, SparseSystem
from .errors import NotPositiveDefinite, SingularSystem, SolverBreakdown

logger = logging.getLogger(__name__)

BACKENDS = ("direct", "cg", "bicgstab", "gmres")


@dataclass(frozen=True)
class SolverConfig:
    backend: str = "direct"
    tol: float = 1e-10
    max_iter: int | None = None  # None -> 10 * n
    restart: int = 50
    precondition: bool = True
    record_history: bool = False

    def __post_init__(self):
        backend = self.backend.lower()
        aliases = {"backslash": "direct", "bicg": "bicgstab"}
        backend = aliases.get(backend, backend)
        if backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}; choose from {BACKENDS}")
        object.__setattr__(self, "backend", backend)
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class SolveReport:
    x: np.ndarray
    precision: float
    iterations: int = 0
    solve_seconds: float = 0.0
    assembly_seconds: float = 0.0
    nnz: int = 0
    backend: str = "direct"
    converged: bool = True
    status: str = "ok"
    history: list = field(default_factory=list, repr=False)

    def metrics(self) -> dict:
        return {
            "backend": self.backend,
            "precision": self.precision,
            "iterations": self.iterations,
            "solve_seconds": self.solve_seconds,
            "assembly_seconds": self.assembly_seconds,
            "nnz": self.nnz,
            "converged": self.converged,
            "status": self.status,
        }


def precision(ns: NormalSystem, x) -> float:
    """Relative residual ``||A~ x - b~|| / ||b~||`` (absolute if ``b~ = 0``)."""
    r = np.linalg.norm(ns.A_tilde @ x - ns.b_tilde)
    nb = np.linalg.norm(ns.b_tilde)
    return float(r / nb) if nb > 0 else float(r)


def solve_direct(ns: NormalSystem) -> SolveReport:
    """Sparse LDL^T-style factorization: SuperLU with a symmetric fill-reducing
    ordering and no off-diagonal pivoting, so the pivots give the inertia.

    The matrix is symmetrically equilibrated first (``S A S`` with
    ``S = diag(A)^-1/2``); this keeps high-order polynomial columns, whose
    scale grows with pixel coordinates, from swamping the pivots.
    """
    t0 = time.perf_counter()
    diag = ns.A_tilde.diagonal()
    if not np.all(diag > 0):
        raise NotPositiveDefinite(f"normal matrix has {int(np.sum(~(diag > 0)))} "
                                  "non-positive diagonal entries")
    s = 1.0 / np.sqrt(diag)
    S = sp.diags(s)
    A = (S @ ns.A_tilde @ S).tocsc()
    try:
        lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise SingularSystem(f"factorization failed: {exc}") from None
    if not np.array_equal(lu.perm_r, lu.perm_c):
        raise NotPositiveDefinite("factorization needed off-diagonal pivoting")
    pivots = lu.U.diagonal()
    if not np.all(pivots > 0):
        bad = int(np.sum(~(pivots > 0)))
        raise NotPositiveDefinite(f"normal matrix has {bad} non-positive pivots")
    x = s * lu.solve(s * ns.b_tilde)
    if ns.gradient is not None:
        x = _refine(ns, x, lambda r: s * lu.solve(s * r))
    elapsed = time.perf_counter() - t0
    return SolveReport(x, precision(ns, x), 0, elapsed, nnz=ns.A_tilde.nnz,
                       backend="direct")


_REFINE_STEPS = 3


def _refine(ns: NormalSystem, x, apply_inverse):
    """Corrected semi-normal equations: reuse the factorization, but take
    residuals from the unsquared system. Stops when steps stop contracting."""
    prev = np.inf
    for _ in range(_REFINE_STEPS):
        step = apply_inverse(ns.gradient(x))
        size = np.linalg.norm(step)
        if not np.isfinite(size) or size > 0.5 * prev:
            break
        x = x + step
        prev = size
        if size <= 1e-15 * np.linalg.norm(x):
            break
    return x


def _jacobi(A):
    d = A.diagonal()
    if np.any(d <= 0):
        raise NotPositiveDefinite("non-positive diagonal entry; Jacobi preconditioner undefined")
    inv = 1.0 / d
    return spla.LinearOperator(A.shape, matvec=lambda v: inv * v.ravel(), dtype=float)


_MAX_RESTARTS = 3


def solve_iterative(ns: NormalSystem, cfg: SolverConfig) -> SolveReport:
    """Krylov solve; hitting ``max_iter`` is reported, not raised."""
    A, b = ns.A_tilde, ns.b_tilde
    n = ns.n
    max_iter = cfg.max_iter or 10 * n
    M = _jacobi(A) if cfg.precondition else None
    history = []
    count = [0]

    def on_iterate(xk):
        count[0] += 1
        if cfg.record_history:
            history.append(np.array(xk, copy=True))

    def on_residual(_):
        count[0] += 1

    def run(x0, budget):
        if cfg.backend == "cg":
            return spla.cg(A, b, x0=x0, rtol=cfg.tol, atol=0.0, maxiter=budget,
                           M=M, callback=on_iterate)
        if cfg.backend == "bicgstab":
            return spla.bicgstab(A, b, x0=x0, rtol=cfg.tol, atol=0.0, maxiter=budget,
                                 M=M, callback=on_iterate)
        if cfg.backend == "gmres":
            restart = min(cfg.restart, n)
            outer = max(1, -(-budget // restart))
            return spla.gmres(A, b, x0=x0, rtol=cfg.tol, atol=0.0, restart=restart,
                              maxiter=outer, M=M, callback=on_residual,
                              callback_type="pr_norm")
        raise ValueError(f"{cfg.backend!r} is not an iterative backend")

    t0 = time.perf_counter()
    x, info = run(np.zeros(n), max_iter)
    prec = precision(ns, x)
    # the recurrence residual drifts from the true one; restart from x while it helps
    for _ in range(_MAX_RESTARTS):
        if info != 0 or prec <= cfg.tol or count[0] >= max_iter:
            break
        x_new, info = run(x, max_iter - count[0])
        p_new = precision(ns, x_new)
        if not p_new < 0.5 * prec:
            if p_new < prec:
                x, prec = x_new, p_new
            break
        x, prec = x_new, p_new
    elapsed = time.perf_counter() - t0

    if info == 0:
        status, converged = "converged", True
    elif info > 0:
        status, converged = "max_iter", False
        logger.warning("%s stopped after %d iterations without reaching tol %g",
                       cfg.backend, count[0], cfg.tol)
    else:
        status, converged = "breakdown", False
        logger.warning("%s broke down (info=%d)", cfg.backend, info)
    if not converged and prec <= cfg.tol:
        status, converged = "converged", True
    if not np.all(np.isfinite(x)):
        raise SolverBreakdown(f"{cfg.backend} produced non-finite values")
    return SolveReport(x, prec, count[0], elapsed, nnz=A.nnz, backend=cfg.backend,
                       converged=converged, status=status, history=history)


def solve(ns: NormalSystem, cfg: SolverConfig | None = None) -> SolveReport:
    cfg = cfg or SolverConfig()
    if cfg.backend == "direct":
        return solve_direct(ns)
    return solve_iterative(ns, cfg)


@dataclass
class ResidualStats:
    per_tile: dict
    global_mean: float
    per_pair: dict = field(default_factory=dict)
    n_points: int = 0


def point_residuals(system: SparseSystem, x) -> np.ndarray:
    """Euclidean distance between the transformed ``p`` and ``q`` of every
    point-pair, in row order of the pairs."""
    r = system.residuals(x)
    out = []
    for ms, r0 in zip(system.pairs, system.row_offsets):
        n = ms.n
        out.append(np.hypot(r[r0:r0 + n], r[r0 + n:r0 + 2 * n]))
    return np.concatenate(out) if out else np.zeros(0)


def residual_stats(system: SparseSystem, x) -> ResidualStats:
    """Mean point-match residual per tile [px] and its mean over tiles.

    Each point-pair's residual counts toward both tiles it links.
    """
    dist = point_residuals(system, x)
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    per_pair = {}
    start = 0
    for ms in system.pairs:
        seg = dist[start:start + ms.n]
        start += ms.n
        s = float(seg.sum())
        per_pair[ms.key] = s / ms.n
        for tid in ms.key:
            sums[tid] = sums.get(tid, 0.0) + s
            counts[tid] = counts.get(tid, 0) + ms.n
    per_tile = {tid: sums[tid] / counts[tid] for tid in sorted(sums)}
    g = float(np.mean(list(per_tile.values()))) if per_tile else 0.0
    return ResidualStats(per_tile, g, per_pair, int(dist.size))


def export_system(ns: NormalSystem, matrix_path, rhs_path) -> None:
    """Write ``A~`` (Matrix Market, symmetric) and ``b~`` (one value per line)."""
    scipy.io.mmwrite(str(matrix_path), sp.coo_matrix(ns.A_tilde), symmetry="symmetric",
                     precision=17)
    write_vector(rhs_path, ns.b_tilde)


def import_system(matrix_path, rhs_path) -> NormalSystem:
    A = scipy.io.mmread(str(matrix_path))
    A = sp.csr_matrix(A)
    A.sort_indices()
    return NormalSystem(A, read_vector(rhs_path))


def write_vector(path, v) -> None:
    Path(path).write_text("".join(f"{float(a)!r}\n" for a in np.asarray(v).ravel()),
                          encoding="utf-8")


def read_vector(path) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8").split()
    return np.array([float(t) for t in text])


def import_solution(path, ns: NormalSystem, backend: str = "external") -> SolveReport:
    """Wrap an externally computed solution vector in a report."""
    x = read_vector(path)
    if x.size != ns.n:
        raise ValueError(f"{path}: solution has {x.size} entries, system has {ns.n}")
    return SolveReport(x, precision(ns, x), 0, nnz=ns.A_tilde.nnz, backend=backend)
