"""Per-parameter regularization weights, lambda sweeps and tile deformation."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assembly import SparseSystem, build_normal_equations, gram
from .errors import SolverError, UnknownSection, UnknownTile
from .model import ModelKind, TransformParams, apply_transform, coefficient_classes, unpack
from .solvers import SolverConfig, residual_stats, solve

logger = logging.getLogger(__name__)

FROZEN = "frozen"
CLASSES = ("translation", "linear", "quadratic", "cubic")


@dataclass(frozen=True)
class LambdaSpec:
    """How strongly each coefficient is pulled toward the prior.

    Precedence, strongest first: ``per_tile``, ``per_section``,
    ``per_class``, ``default``. A ``"frozen"`` tile or section gets
    ``default * frozen_multiplier`` on every coefficient.
    """

    default: float = 1.0
    per_class: dict = field(default_factory=dict)
    per_section: dict = field(default_factory=dict)
    per_tile: dict = field(default_factory=dict)
    frozen_multiplier: float = 1e8

    def __post_init__(self):
        if self.default < 0:
            raise ValueError("default lambda must be >= 0")
        for name in self.per_class:
            if name not in CLASSES:
                raise ValueError(f"unknown coefficient class {name!r}; use one of {CLASSES}")
        for table in (self.per_class, self.per_section, self.per_tile):
            for v in table.values():
                if v != FROZEN and float(v) < 0:
                    raise ValueError("lambda overrides must be >= 0 or 'frozen'")

    def scaled(self, factor: float) -> LambdaSpec:
        def s(v):
            return v if v == FROZEN else float(v) * factor
        return LambdaSpec(
            self.default * factor,
            {k: s(v) for k, v in self.per_class.items()},
            {k: s(v) for k, v in self.per_section.items()},
            {k: s(v) for k, v in self.per_tile.items()},
            self.frozen_multiplier,
        )


def expand_lambda(spec: LambdaSpec, tiles, kind: ModelKind) -> np.ndarray:
    """Per-coefficient lambda vector for ``tiles`` (in column order)."""
    kind = ModelKind.parse(kind)
    ids = {t.tile_id for t in tiles}
    sections = {t.z for t in tiles}
    for tid in spec.per_tile:
        if tid not in ids:
            raise UnknownTile(f"lambda override for unknown tile {tid!r}")
    for z in spec.per_section:
        if z not in sections:
            raise UnknownSection(f"lambda override for unknown section {z!r}")

    classes = coefficient_classes(kind)
    base = np.array([float(spec.per_class.get(c, spec.default)) for c in classes])
    frozen = spec.default * spec.frozen_multiplier
    out = np.empty((len(tiles), kind.n_coeffs))
    for i, t in enumerate(tiles):
        override = spec.per_tile.get(t.tile_id, spec.per_section.get(t.z))
        if override is None:
            out[i] = base
        elif override == FROZEN:
            out[i] = frozen
        else:
            out[i] = float(override)
    return out.ravel()


def polygon_area(poly) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def boundary_points(width: float, height: float, samples_per_edge: int = 8) -> np.ndarray:
    """Counter-clockwise tile outline with ``samples_per_edge`` points per edge."""
    s = np.arange(samples_per_edge) / samples_per_edge
    edges = [
        np.column_stack([s * width, np.zeros_like(s)]),
        np.column_stack([np.full_like(s, width), s * height]),
        np.column_stack([(1 - s) * width, np.full_like(s, height)]),
        np.column_stack([np.zeros_like(s), (1 - s) * height]),
    ]
    return np.concatenate(edges)


def transform_area_ratio(t: TransformParams, width: float, height: float,
                         samples_per_edge: int = 8) -> float:
    if t.kind is ModelKind.TRANSLATION:
        return 1.0
    if t.kind.degree == 1:
        m = t.linear_part()
        return abs(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0])
    outline = apply_transform(t, boundary_points(width, height, samples_per_edge))
    return polygon_area(outline) / (width * height)


@dataclass
class DeformationResult:
    per_tile: dict
    mean: float
    non_finite: list = field(default_factory=list)


def deformation_ratio(tiles, x, kind: ModelKind, samples_per_edge: int = 8) -> DeformationResult:
    """Area of each deformed tile over its original area, and the mean.

    ``x`` is either a packed coefficient vector (tiles in the given order) or
    a mapping ``tile_id -> TransformParams``.
    """
    kind = ModelKind.parse(kind)
    if isinstance(x, dict):
        transforms = x
    else:
        transforms = unpack(x, [t.tile_id for t in tiles], kind)
    ratios = {}
    bad = []
    for t in tiles:
        tr = transforms[t.tile_id]
        if not np.all(np.isfinite(tr.coeffs)):
            ratios[t.tile_id] = float("nan")
            bad.append(t.tile_id)
            continue
        ratios[t.tile_id] = transform_area_ratio(tr, t.width, t.height, samples_per_edge)
    good = [r for tid, r in ratios.items() if tid not in bad]
    mean = float(np.mean(good)) if good else float("nan")
    if bad:
        logger.warning("%d tiles have non-finite transforms", len(bad))
    return DeformationResult(ratios, mean, bad)


@dataclass
class SweepRow:
    lam: float
    mean_deformation_ratio: float
    global_mean_residual_px: float
    precision: float
    solve_seconds: float = 0.0
    status: str = "ok"
    x: np.ndarray = field(default=None, repr=False)


def sweep_lambda(system: SparseSystem, prior, lambdas, tiles,
                 config: SolverConfig | None = None, *, reuse_gram: bool = True,
                 keep_solutions: bool = False) -> list[SweepRow]:
    """Solve once per lambda, scaling the prior's whole lambda vector.

    ``prior`` is a :class:`~tilealign.rigid_prior.PriorVector` whose
    ``lambda_diag`` is the unit-scale pattern. Failed solves yield a row with
    ``status`` set and NaN metrics; the sweep carries on.
    """
    lambdas = sorted(float(v) for v in lambdas)
    if not lambdas or any(v <= 0 for v in lambdas):
        raise ValueError("lambdas must be a non-empty list of positive values")
    config = config or SolverConfig()
    by_id = {t.tile_id: t for t in tiles}
    ordered = [by_id[t] for t in system.tile_order]
    parts = gram(system) if reuse_gram else None
    rows = []
    for lam in lambdas:
        t0 = time.perf_counter()
        try:
            ns = build_normal_equations(system, lam * prior.lambda_diag, prior.B_diag,
                                        prior.d, gram_parts=parts)
            rep = solve(ns, config)
        except SolverError as exc:
            logger.warning("lambda=%g failed: %s", lam, exc)
            rows.append(SweepRow(lam, float("nan"), float("nan"), float("nan"),
                                 time.perf_counter() - t0, f"failed: {exc}"))
            continue
        defo = deformation_ratio(ordered, rep.x, system.kind)
        res = residual_stats(system, rep.x)
        rows.append(SweepRow(lam, defo.mean, res.global_mean, rep.precision,
                             time.perf_counter() - t0, rep.status,
                             rep.x if keep_solutions else None))
    return rows


SWEEP_HEADER = ("lambda", "mean_deformation_ratio", "mean_residual_px", "precision")


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow([repr(float(v)) for v in
                    (r.lam, r.mean_deformation_ratio, r.global_mean_residual_px, r.precision)])
    return buf.getvalue()


def write_sweep_csv(path, rows) -> None:
    Path(path).write_text(sweep_csv(rows), encoding="utf-8")


def log_lambdas(lo: float, hi: float, steps: int) -> list[float]:
    return [float(v) for v in np.logspace(np.log10(lo), np.log10(hi), steps)]
