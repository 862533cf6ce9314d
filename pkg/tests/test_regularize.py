import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tilealign.assembly import build_system
from tilealign.errors import UnknownSection, UnknownTile
from tilealign.model import ModelKind, TileSpec, TransformParams, rotation
from tilealign.pipeline import build_prior
from tilealign.regularize import (SWEEP_HEADER, LambdaSpec, boundary_points, deformation_ratio,
                                  expand_lambda, log_lambdas, polygon_area, sweep_csv,
                                  sweep_lambda, write_sweep_csv)
from tilealign.rigid_prior import estimate_rigid_prior
from tilealign.synth import SynthConfig, generate

AFF = ModelKind.AFFINE


def tiles_ab():
    return [TileSpec("a", 0, 100, 50), TileSpec("b", 7, 100, 50)]


def test_expand_default_only():
    np.testing.assert_array_equal(expand_lambda(LambdaSpec(0.1), tiles_ab(), AFF), np.full(12, 0.1))


def test_expand_translation_class():
    v = expand_lambda(LambdaSpec(0.1, per_class={"translation": 1e-4}), tiles_ab(), AFF)
    for tile in range(2):
        block = v[6 * tile:6 * tile + 6]
        assert list(np.flatnonzero(block == 1e-4)) == [2, 5]
        assert np.all(np.delete(block, [2, 5]) == 0.1)


def test_expand_frozen_section():
    v = expand_lambda(LambdaSpec(0.05, per_section={7: "frozen"}), tiles_ab(), AFF)
    np.testing.assert_allclose(v[6:], 5e6, rtol=1e-15)
    np.testing.assert_array_equal(v[:6], 0.05)


def test_expand_precedence():
    spec = LambdaSpec(1.0, per_class={"linear": 2.0}, per_section={7: 3.0, 0: 5.0},
                      per_tile={"a": 4.0})
    v = expand_lambda(spec, tiles_ab(), AFF)
    np.testing.assert_array_equal(v[:6], 4.0)
    np.testing.assert_array_equal(v[6:], 3.0)
    poly = expand_lambda(LambdaSpec(1.0, per_class={"quadratic": 9.0}), tiles_ab()[:1],
                         ModelKind.POLY2)
    np.testing.assert_array_equal(np.flatnonzero(poly == 9.0), [3, 4, 5, 9, 10, 11])


def test_expand_unknown_references():
    with pytest.raises(UnknownTile):
        expand_lambda(LambdaSpec(per_tile={"nope": 1.0}), tiles_ab(), AFF)
    with pytest.raises(UnknownSection):
        expand_lambda(LambdaSpec(per_section={3: 1.0}), tiles_ab(), AFF)
    with pytest.raises(ValueError):
        LambdaSpec(per_class={"shear": 1.0})
    with pytest.raises(ValueError):
        LambdaSpec(-1.0)


@settings(max_examples=50, deadline=None)
@given(st.permutations([("a", 2.0), ("b", "frozen")]),
       st.permutations([(0, 0.5), (7, 0.25)]))
def test_expand_ignores_insertion_order(tile_items, section_items):
    spec = LambdaSpec(1.0, per_tile=dict(tile_items), per_section=dict(section_items))
    ref = LambdaSpec(1.0, per_tile={"a": 2.0, "b": "frozen"}, per_section={0: 0.5, 7: 0.25})
    a = expand_lambda(spec, tiles_ab(), AFF)
    assert np.array_equal(a, expand_lambda(ref, tiles_ab(), AFF))
    assert np.array_equal(a, expand_lambda(spec, tiles_ab(), AFF))


def test_scaled_keeps_structure():
    spec = LambdaSpec(2.0, per_class={"translation": 0.5}, per_tile={"b": "frozen"})
    v1 = expand_lambda(spec, tiles_ab(), AFF)
    v10 = expand_lambda(spec.scaled(10), tiles_ab(), AFF)
    np.testing.assert_allclose(v10, 10 * v1, rtol=1e-15)


def test_deformation_examples():
    tiles = tiles_ab()
    ident = {t.tile_id: TransformParams.identity(AFF) for t in tiles}
    r = deformation_ratio(tiles, ident, AFF)
    assert all(v == 1.0 for v in r.per_tile.values()) and r.mean == 1.0
    scaled = {t.tile_id: TransformParams.from_affine(0.9, 0, 5, 0, 0.9, -2) for t in tiles}
    r = deformation_ratio(tiles, scaled, AFF)
    assert r.mean == pytest.approx(0.81, rel=1e-14)


def test_poly_area_matches_affine_det(rng):
    for _ in range(20):
        a = TransformParams.from_affine(*rng.normal(size=6))
        p = a.convert(ModelKind.POLY2)
        t = TileSpec("t", 0, rng.uniform(10, 500), rng.uniform(10, 500))
        ra = deformation_ratio([t], {"t": a}, AFF).mean
        rp = deformation_ratio([t], {"t": p}, ModelKind.POLY2).mean
        assert abs(ra - rp) <= 1e-9 * max(1.0, ra)


def test_packed_vector_input():
    x = np.tile([0.5, 0, 0, 0, 2.0, 0], 2)
    r = deformation_ratio(tiles_ab(), x, AFF)
    assert r.per_tile == {"a": 1.0, "b": 1.0}


def test_non_finite_flagged():
    t = {"a": TransformParams.from_affine(np.nan, 0, 0, 0, 1, 0),
         "b": TransformParams.identity(AFF)}
    r = deformation_ratio(tiles_ab(), t, AFF)
    assert r.non_finite == ["a"] and r.mean == 1.0


def test_polygon_helpers():
    pts = boundary_points(4, 3, 8)
    assert pts.shape == (32, 2)
    assert polygon_area(pts) == pytest.approx(12.0)


def test_rigid_prior_is_area_preserving(grid4_noisy):
    rigid = estimate_rigid_prior(grid4_noisy.tiles, grid4_noisy.matches)
    r = deformation_ratio(grid4_noisy.tiles, rigid.transforms(), AFF)
    assert max(abs(v - 1) for v in r.per_tile.values()) <= 1e-9


def _sweep_inputs(ds):
    system = build_system(ds.tiles, ds.matches, AFF)
    pv, _ = build_prior(ds.tiles, ds.matches, system, AFF, 1.0)
    return system, pv


def test_sweep_limits(grid4_noisy):
    system, pv = _sweep_inputs(grid4_noisy)
    rows = sweep_lambda(system, pv, [1e8, 1e-2, 1.0], grid4_noisy.tiles)
    assert [r.lam for r in rows] == [1e-2, 1.0, 1e8]
    assert abs(rows[-1].mean_deformation_ratio - 1) <= 1e-3
    assert all(r.status == "ok" for r in rows)


def test_small_lambda_fits_noiseless_data_better(grid4):
    system, pv = _sweep_inputs(grid4)
    tiny, one = sweep_lambda(system, pv, [1e-10, 1.0], grid4.tiles)
    assert tiny.global_mean_residual_px <= one.global_mean_residual_px


def test_sweep_gram_reuse_identical(grid4_noisy):
    system, pv = _sweep_inputs(grid4_noisy)
    lams = log_lambdas(1e-3, 1e3, 5)
    a = sweep_lambda(system, pv, lams, grid4_noisy.tiles, keep_solutions=True)
    b = sweep_lambda(system, pv, lams, grid4_noisy.tiles, reuse_gram=False, keep_solutions=True)
    for ra, rb in zip(a, b):
        assert np.linalg.norm(ra.x - rb.x) <= 1e-12 * np.linalg.norm(rb.x)
        assert ra.mean_deformation_ratio == pytest.approx(rb.mean_deformation_ratio, abs=1e-12)


def test_sweep_rejects_bad_lambdas(grid4):
    system, pv = _sweep_inputs(grid4)
    for bad in ([], [0.0, 1.0], [-1.0]):
        with pytest.raises(ValueError):
            sweep_lambda(system, pv, bad, grid4.tiles)


def test_failed_rows_are_marked_and_sweep_continues(grid4):
    system, pv = _sweep_inputs(grid4)
    zero_prior = type(pv)(pv.d, pv.B_diag, np.zeros_like(pv.lambda_diag), pv.tile_order, pv.kind)
    rows = sweep_lambda(system, zero_prior, [1.0, 2.0], grid4.tiles)
    assert all(r.status.startswith("failed") for r in rows)
    assert all(math.isnan(r.precision) for r in rows)


def test_sweep_csv(tmp_path, grid4):
    system, pv = _sweep_inputs(grid4)
    rows = sweep_lambda(system, pv, log_lambdas(1e-2, 1e2, 3), grid4.tiles)
    text = sweep_csv(rows)
    lines = text.splitlines()
    assert lines[0] == ",".join(SWEEP_HEADER) == "lambda,mean_deformation_ratio,mean_residual_px,precision"
    assert len(lines) == 4
    assert float(lines[1].split(",")[0]) == pytest.approx(1e-2)
    write_sweep_csv(tmp_path / "s.csv", rows)
    assert (tmp_path / "s.csv").read_text() == text


def test_rotation_does_not_change_deformation():
    t = [TileSpec("a", 0, 30, 20)]
    for th in np.linspace(0, 2 * math.pi, 13):
        m = 1.3 * rotation(th)
        tr = TransformParams.from_affine(m[0, 0], m[0, 1], 1, m[1, 0], m[1, 1], 2)
        assert deformation_ratio(t, {"a": tr}, AFF).mean == pytest.approx(1.69, rel=1e-12)
        assert deformation_ratio(t, {"a": tr.convert(ModelKind.POLY3)},
                                 ModelKind.POLY3).mean == pytest.approx(1.69, rel=1e-12)


def test_sweep_per_solve_time_is_small():
    ds = generate(SynthConfig(grid_rows=20, grid_cols=27, noise_sigma_px=1.0, seed=12))
    system, pv = _sweep_inputs(ds)
    rows = sweep_lambda(system, pv, log_lambdas(1e-6, 1e8, 20), ds.tiles)
    assert len(rows) == 20
    assert max(r.solve_seconds for r in rows) < 1.0
