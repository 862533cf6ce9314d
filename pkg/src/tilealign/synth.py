"""Synthetic montages and volumes with known ground truth.

Tiles sit on a regular grid with a given fractional overlap. Each tile's true
tile-to-world transform is its nominal placement composed with a random
rotation, translation and small linear (and, for polynomial truths, higher
order) distortion about the tile center. Matches are sampled uniformly in the
true overlap of two tiles, mapped back into each tile's local frame, and
jittered by independent Gaussian noise on each side.

Random streams are derived from ``(seed, section, purpose, index)`` so every
pair and section can be generated independently in any order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .assembly import MatchSet
from .errors import OverlapEmpty
from .regularize import boundary_points
from .model import (ModelKind, TileSpec, TransformParams, apply_transform,
                    rotation)

_TRUTH, _PAIR, _SECTION, _CROSS = 0, 1, 2, 3
MAX_RESAMPLE = 10


@dataclass(frozen=True)
class SynthConfig:
    grid_rows: int = 4
    grid_cols: int = 4
    sections: int = 1
    tile_w: float = 400.0
    tile_h: float = 400.0
    overlap_fraction: float = 0.1
    matches_per_pair: int = 20
    noise_sigma_px: float = 0.0
    truth_model: ModelKind = ModelKind.AFFINE
    rotation_deg: float = 1.0
    translation_px: float = 4.0
    linear_scale: float = 0.01
    nonlinear_scale: float = 0.0
    section_drift_px: float = 10.0
    section_rotation_deg: float = 0.5
    cross_section_span: int = 1
    cross_min_overlap: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "truth_model", ModelKind.parse(self.truth_model))
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ValueError("grid dimensions must be >= 1")
        if self.sections < 1:
            raise ValueError("sections must be >= 1")
        if not (self.tile_w > 0 and self.tile_h > 0):
            raise ValueError("tile size must be positive")
        if not 0 < self.overlap_fraction < 1:
            raise ValueError("overlap_fraction must lie in (0, 1)")
        if self.matches_per_pair < 2:
            raise ValueError("matches_per_pair must be >= 2")
        if self.noise_sigma_px < 0:
            raise ValueError("noise_sigma_px must be >= 0")
        if self.truth_model in (ModelKind.TRANSLATION, ModelKind.RIGID_APPROX):
            raise ValueError("truth_model must be affine or polynomial")
        if self.cross_section_span < 1:
            raise ValueError("cross_section_span must be >= 1")


@dataclass
class SynthDataset:
    tiles: list
    matches: list
    truth: dict
    grid: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.tiles, self.matches, self.truth))


def tile_id(z: int, r: int, c: int) -> str:
    return f"z{z:04d}_r{r:03d}_c{c:03d}"


def _rng(cfg: SynthConfig, *path: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *path])


def _nominal_origin(cfg, r, c):
    step_x = cfg.tile_w * (1 - cfg.overlap_fraction)
    step_y = cfg.tile_h * (1 - cfg.overlap_fraction)
    return np.array([c * step_x, r * step_y])


def _truth_transform(cfg: SynthConfig, z: int, r: int, c: int, attempt: int,
                     section_g: np.ndarray | None) -> TransformParams:
    """Tile-to-world map: x -> S(o + c0 + R (I + E) (x - c0) + t) [+ poly terms]."""
    rng = _rng(cfg, z, _TRUTH, r, c, attempt)
    theta = math.radians(cfg.rotation_deg) * rng.uniform(-1, 1)
    t = cfg.translation_px * rng.uniform(-1, 1, 2)
    E = cfg.linear_scale * rng.uniform(-1, 1, (2, 2))
    L = rotation(theta) @ (np.eye(2) + E)
    center = np.array([cfg.tile_w, cfg.tile_h]) / 2
    offset = _nominal_origin(cfg, r, c) + center - L @ center + t
    if section_g is not None:
        L = section_g[:, :2] @ L
        offset = section_g[:, :2] @ offset + section_g[:, 2]
    kind = cfg.truth_model
    nb = kind.n_basis
    coeffs = np.zeros(kind.n_coeffs)
    coeffs[0:3] = L[0, 0], L[0, 1], offset[0]
    coeffs[nb:nb + 3] = L[1, 0], L[1, 1], offset[1]
    if kind.degree > 1:
        # keep the displacement of higher-order terms ~ nonlinear_scale px at the tile edge
        size = max(cfg.tile_w, cfg.tile_h)
        for k in range(3, nb):
            deg = 2 if k < 6 else 3
            amp = cfg.nonlinear_scale / size ** deg
            coeffs[k], coeffs[nb + k] = amp * rng.uniform(-1, 1, 2)
    return TransformParams(kind, coeffs)


def _section_transform(cfg: SynthConfig, z: int) -> np.ndarray:
    if z == 0:
        return np.array([[1.0, 0, 0], [0, 1.0, 0]])
    rng = _rng(cfg, z, _SECTION)
    theta = math.radians(cfg.section_rotation_deg) * rng.uniform(-1, 1)
    drift = cfg.section_drift_px * rng.uniform(-1, 1, 2)
    extent = np.array([
        cfg.grid_cols * cfg.tile_w * (1 - cfg.overlap_fraction),
        cfg.grid_rows * cfg.tile_h * (1 - cfg.overlap_fraction),
    ]) / 2
    R = rotation(theta)
    # rotate about the middle of the section
    return np.column_stack([R, extent - R @ extent + drift])


def invert_points(t: TransformParams, world, width: float, height: float,
                  tol: float = 1e-12, max_iter: int = 50) -> np.ndarray:
    """Local coordinates mapping to ``world`` under ``t`` (Newton for polynomials)."""
    world = np.asarray(world, dtype=float).reshape(-1, 2)
    L = t.linear_part()
    tr = t.translation_part()
    x = np.linalg.solve(L, (world - tr).T).T
    if t.kind.degree == 1:
        return x
    nb = t.kind.n_basis
    cu, cv = t.coeffs[:nb], t.coeffs[nb:]
    scale = max(width, height)
    for _ in range(max_iter):
        f = apply_transform(t, x) - world
        if np.max(np.abs(f)) <= tol * scale:
            break
        J = _jacobian(t.kind, x, cu, cv)
        x = x - np.linalg.solve(J, f[..., None])[..., 0]
    return x


def _jacobian(kind, x, cu, cv):
    px, py = x[:, 0], x[:, 1]
    one, zero = np.ones_like(px), np.zeros_like(px)
    dx = [one, zero, zero, 2 * px, py, zero]
    dy = [zero, one, zero, zero, px, 2 * py]
    if kind.degree >= 3:
        dx += [3 * px * px, 2 * px * py, py * py, zero]
        dy += [zero, px * px, 2 * px * py, 3 * py * py]
    Bx, By = np.column_stack(dx), np.column_stack(dy)
    J = np.empty((len(px), 2, 2))
    J[:, 0, 0], J[:, 0, 1] = Bx @ cu, By @ cu
    J[:, 1, 0], J[:, 1, 1] = Bx @ cv, By @ cv
    return J


def _inside(local, tile: TileSpec, margin: float = 0.0) -> np.ndarray:
    return ((local[:, 0] >= margin) & (local[:, 0] <= tile.width - margin)
            & (local[:, 1] >= margin) & (local[:, 1] <= tile.height - margin))


def _sample_pair(cfg, rng, tp: TileSpec, tq: TileSpec, Tp, Tq, n: int):
    """``n`` world points uniform in the true overlap, in both local frames."""

    outline_p = apply_transform(Tp, boundary_points(tp.width, tp.height))
    outline_q = apply_transform(Tq, boundary_points(tq.width, tq.height))
    lo = np.maximum(outline_p.min(axis=0), outline_q.min(axis=0))
    hi = np.minimum(outline_p.max(axis=0), outline_q.max(axis=0))
    if np.any(hi <= lo):
        return None
    got_p, got_q = [], []
    have = 0
    for _ in range(200):
        world = rng.uniform(lo, hi, size=(4 * n, 2))
        lp = invert_points(Tp, world, tp.width, tp.height)
        lq = invert_points(Tq, world, tq.width, tq.height)
        ok = _inside(lp, tp) & _inside(lq, tq)
        got_p.append(lp[ok])
        got_q.append(lq[ok])
        have += int(ok.sum())
        if have >= n:
            break
    if have < n:
        return None
    return np.concatenate(got_p)[:n], np.concatenate(got_q)[:n]


def _make_pair(cfg, path, tp, tq, truth):
    rng = _rng(cfg, *path)
    got = _sample_pair(cfg, rng, tp, tq, truth[tp.tile_id], truth[tq.tile_id],
                       cfg.matches_per_pair)
    if got is None:
        return None
    p, q = got
    if cfg.noise_sigma_px > 0:
        p = p + rng.normal(0.0, cfg.noise_sigma_px, p.shape)
        q = q + rng.normal(0.0, cfg.noise_sigma_px, q.shape)
    return MatchSet(tp.tile_id, tq.tile_id, p, q)


def _grid_neighbors(cfg):
    pairs = []
    for r in range(cfg.grid_rows):
        for c in range(cfg.grid_cols):
            if c + 1 < cfg.grid_cols:
                pairs.append(((r, c), (r, c + 1)))
            if r + 1 < cfg.grid_rows:
                pairs.append(((r, c), (r + 1, c)))
    return pairs


def _layer(cfg: SynthConfig, z: int):
    g = _section_transform(cfg, z) if cfg.sections > 1 else None
    for attempt in range(MAX_RESAMPLE):
        tiles, truth = [], {}
        for r in range(cfg.grid_rows):
            for c in range(cfg.grid_cols):
                spec = TileSpec(tile_id(z, r, c), z, cfg.tile_w, cfg.tile_h)
                tiles.append(spec)
                truth[spec.tile_id] = _truth_transform(cfg, z, r, c, attempt, g)
        by_rc = {(r, c): tiles[r * cfg.grid_cols + c]
                 for r in range(cfg.grid_rows) for c in range(cfg.grid_cols)}
        matches = []
        for k, (a, b) in enumerate(_grid_neighbors(cfg)):
            ms = _make_pair(cfg, (z, _PAIR, k, attempt), by_rc[a], by_rc[b], truth)
            if ms is None:
                break
            matches.append(ms)
        else:
            return tiles, matches, truth
    raise OverlapEmpty(f"section {z}: tile overlaps vanished after {MAX_RESAMPLE} attempts")


def generate_montage(cfg: SynthConfig) -> SynthDataset:
    if cfg.sections != 1:
        raise ValueError("generate_montage needs sections=1; use generate_volume")
    tiles, matches, truth = _layer(cfg, 0)
    return SynthDataset(tiles, matches, truth)


def _nominal_rect(cfg, r, c):
    o = _nominal_origin(cfg, r, c)
    return o, o + np.array([cfg.tile_w, cfg.tile_h])


def _cross_candidates(cfg):
    """Grid positions whose nominal rectangles share at least
    ``cross_min_overlap`` of a tile's area."""
    cells = [(r, c) for r in range(cfg.grid_rows) for c in range(cfg.grid_cols)]
    area = cfg.tile_w * cfg.tile_h
    out = []
    for a in cells:
        lo_a, hi_a = _nominal_rect(cfg, *a)
        for b in cells:
            lo_b, hi_b = _nominal_rect(cfg, *b)
            ext = np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b)
            if np.all(ext > 0) and ext[0] * ext[1] >= cfg.cross_min_overlap * area:
                out.append((a, b))
    return out


def generate_volume(cfg: SynthConfig) -> SynthDataset:
    if cfg.sections < 2:
        raise ValueError("generate_volume needs sections >= 2")
    tiles, matches, truth = [], [], {}
    by_key = {}
    for z in range(cfg.sections):
        t, m, tr = _layer(cfg, z)
        tiles += t
        matches += m
        truth.update(tr)
        for spec in t:
            by_key[spec.tile_id] = spec
    candidates = _cross_candidates(cfg)
    for z in range(cfg.sections):
        for dz in range(1, cfg.cross_section_span + 1):
            if z + dz >= cfg.sections:
                continue
            for k, (a, b) in enumerate(candidates):
                tp = by_key[tile_id(z, *a)]
                tq = by_key[tile_id(z + dz, *b)]
                ms = _make_pair(cfg, (z, _CROSS, dz, k), tp, tq, truth)
                if ms is None:
                    raise OverlapEmpty(f"no overlap between {tp.tile_id} and {tq.tile_id}")
                matches.append(ms)
    return SynthDataset(tiles, matches, truth)


def generate(cfg: SynthConfig) -> SynthDataset:
    return generate_volume(cfg) if cfg.sections > 1 else generate_montage(cfg)


@dataclass
class GaugeResult:
    g: TransformParams
    rms: float
    max_error: float
    per_tile_rms: dict = field(default_factory=dict)


def gauge_align(solution: dict, truth: dict, tiles) -> GaugeResult:
    """Best global affine ``g`` with ``g(solution(corner)) ~ truth(corner)``
    over the four corners of every tile, and the corner errors after it."""
    ids = [t.tile_id for t in tiles]
    if set(ids) - set(solution) or set(ids) - set(truth):
        raise KeyError("solution and truth must cover the same tiles")
    src, dst = [], []
    for t in tiles:
        corners = t.corners()
        src.append(apply_transform(solution[t.tile_id], corners))
        dst.append(apply_transform(truth[t.tile_id], corners))
    src = np.concatenate(src)
    dst = np.concatenate(dst)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    X = np.column_stack([src - mu_s, np.ones(len(src))])
    coef, *_ = np.linalg.lstsq(X, dst - mu_d, rcond=None)
    L = coef[:2].T
    off = mu_d + coef[2] - L @ mu_s
    g = TransformParams.from_affine(L[0, 0], L[0, 1], off[0], L[1, 0], L[1, 1], off[1])
    err = np.linalg.norm(apply_transform(g, src) - dst, axis=1)
    per_tile = {tid: float(np.sqrt(np.mean(err[4 * i:4 * i + 4] ** 2)))
                for i, tid in enumerate(ids)}
    return GaugeResult(g, float(np.sqrt(np.mean(err ** 2))), float(err.max()), per_tile)
