import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from tilealign import io as tio
from tilealign.assembly import build_system
from tilealign.cli import main
from tilealign.errors import DanglingReference, ParseError
from tilealign.model import ModelKind, TransformParams, pack
from tilealign.pipeline import solve_dataset
from tilealign.solvers import import_system, residual_stats, solve, write_vector
from tilealign.synth import SynthConfig, generate


def write(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture
def minimal(tmp_path):
    tiles = write(tmp_path / "tiles.json", [
        {"tile_id": "a", "z": 0, "width": 100, "height": 100},
        {"tile_id": "b", "z": 0, "width": 100, "height": 100}])
    matches = write(tmp_path / "matches.json", [
        {"p_tile": "a", "q_tile": "b", "p": [[90, 10], [95, 50], [92, 90]],
         "q": [[0, 10], [5, 50], [2, 90]]}])
    return tiles, matches


@pytest.fixture
def synth_dir(tmp_path):
    ds = generate(SynthConfig(noise_sigma_px=0.3, seed=17))
    paths = tio.save_dataset(tmp_path / "data", ds.tiles, ds.matches, ds.truth)
    return ds, paths


def test_minimal_load(minimal):
    ds = tio.load_dataset(*minimal)
    assert [t.tile_id for t in ds.tiles] == ["a", "b"]
    assert len(ds.matches) == 1 and ds.matches[0].n == 3
    np.testing.assert_array_equal(ds.matches[0].w, 1.0)


def test_dangling_reference(tmp_path, minimal):
    bad = write(tmp_path / "m2.json", [{"p_tile": "a", "q_tile": "ghost",
                                         "p": [[1, 1]], "q": [[1, 1]]}])
    with pytest.raises(DanglingReference, match="ghost"):
        tio.load_dataset(minimal[0], bad)


def test_parse_errors_name_the_record(tmp_path, minimal):
    (tmp_path / "broken.json").write_text("[{")
    with pytest.raises(ParseError, match="broken.json"):
        tio.load_dataset(tmp_path / "broken.json", minimal[1])
    bad = write(tmp_path / "t.json", [{"tile_id": "a", "z": 0, "width": 1}])
    with pytest.raises(ParseError, match="record 0"):
        tio.load_dataset(bad, minimal[1])
    with pytest.raises(ParseError):
        tio.load_dataset(tmp_path / "missing.json", minimal[1])


def test_duplicate_pairs_merged(tmp_path, minimal):
    m = json.loads(minimal[1].read_text())
    flipped = {"p_tile": "b", "q_tile": "a", "p": m[0]["q"], "q": m[0]["p"]}
    path = write(tmp_path / "dup.json", m + [flipped])
    ds = tio.load_dataset(minimal[0], path)
    assert len(ds.matches) == 1 and ds.matches[0].n == 6


def test_out_of_bounds_points_warn(tmp_path, minimal, caplog):
    far = write(tmp_path / "far.json", [{"p_tile": "a", "q_tile": "b",
                                          "p": [[900, 10], [0, 0]], "q": [[0, 0], [1, 1]]}])
    tio.load_dataset(minimal[0], far)
    assert "outside the tile" in caplog.text


def test_dataset_round_trip(synth_dir):
    ds, paths = synth_dir
    back = tio.load_dataset(paths["tiles"], paths["matches"])
    assert back.tiles == sorted(ds.tiles, key=lambda t: t.tile_id)
    assert len(back.tiles) == 16
    for a, b in zip(back.matches, ds.matches):
        assert a.key == b.key
        assert np.array_equal(a.p, b.p) and np.array_equal(a.q, b.q) and np.array_equal(a.w, b.w)
    truth = tio.load_transforms(paths["truth"])
    for tid, t in ds.truth.items():
        assert np.array_equal(truth[tid].coeffs, t.coeffs) and truth[tid].kind is t.kind


def test_weights_survive_round_trip(tmp_path, minimal):
    ds = tio.load_dataset(*minimal)
    m = ds.matches[0]
    weighted = type(m)(m.p_tile, m.q_tile, m.p, m.q, [0.5, 1.0, 2.0])
    tio.save_dataset(tmp_path / "w", ds.tiles, [weighted])
    back = tio.load_dataset(tmp_path / "w" / "tiles.json", tmp_path / "w" / "matches.json")
    np.testing.assert_array_equal(back.matches[0].w, [0.5, 1.0, 2.0])


def test_identity_transforms_round_trip(tmp_path):
    t = {k: TransformParams.identity(ModelKind.parse(k)) for k in ("affine", "poly2", "poly3")}
    tio.save_transforms(tmp_path / "t.json", t)
    back = tio.load_transforms(tmp_path / "t.json")
    for k, v in t.items():
        assert back[k].kind is v.kind and np.array_equal(back[k].coeffs, v.coeffs)
    assert not tio.metrics_path(tmp_path / "t.json").exists()


def test_solution_round_trip_and_metrics(tmp_path, synth_dir):
    ds, _ = synth_dir
    sol = solve_dataset(ds.tiles, ds.matches, lambda_spec=0.1)
    out = tmp_path / "sol.json"
    tio.save_transforms(out, sol.transforms, sol.report, {
        "mean_residual_px": sol.residuals.global_mean,
        "point_matches": sol.system.n_point_matches})
    metrics = tio.load_metrics(out)
    assert set(tio.METRIC_FIELDS) <= set(metrics)
    assert metrics["nnz"] == sol.system.nnz
    back = tio.load_transforms(out)
    system = build_system(ds.tiles, ds.matches, ModelKind.AFFINE)
    x = pack(back, system.tile_order, ModelKind.AFFINE)
    assert np.array_equal(x, sol.report.x)
    assert residual_stats(system, x) == sol.residuals


def test_writers_are_byte_identical(tmp_path, synth_dir):
    ds, paths = synth_dir
    again = tio.save_dataset(tmp_path / "again", ds.tiles, ds.matches, ds.truth)
    for key in paths:
        assert paths[key].read_bytes() == again[key].read_bytes()


# CLI

def run(*argv):
    return main([str(a) for a in argv])


def data_args(paths):
    return ["--tiles", paths["tiles"], "--matches", paths["matches"]]


def test_cli_solve(tmp_path, synth_dir):
    ds, paths = synth_dir
    out = tmp_path / "x.json"
    assert run("solve", *data_args(paths), "--model", "affine", "--lambda", 0.1,
               "--backend", "direct", "--out", out) == 0
    t = tio.load_transforms(out)
    assert set(t) == set(ds.truth)
    metrics = tio.load_metrics(out)
    assert set(tio.METRIC_FIELDS) <= set(metrics)
    assert metrics["precision"] <= 1e-9


@pytest.mark.parametrize("model", ["translation", "poly2", "poly3"])
def test_cli_solve_models(tmp_path, synth_dir, model):
    _, paths = synth_dir
    out = tmp_path / "x.json"
    assert run("solve", *data_args(paths), "--model", model, "--out", out) == 0
    assert {t.kind.value for t in tio.load_transforms(out).values()} == {model}


def test_cli_lambda_zero_is_singular(tmp_path, synth_dir, capsys):
    _, paths = synth_dir
    assert run("solve", *data_args(paths), "--lambda", 0, "--out", tmp_path / "x.json") == 3
    assert "SingularSystem" in capsys.readouterr().err


def test_cli_lambda_zero_with_fixed_tile(tmp_path, synth_dir):
    ds, paths = synth_dir
    anchor = ds.tiles[0].tile_id
    out = tmp_path / "x.json"
    assert run("solve", *data_args(paths), "--lambda", 0, "--fix-tile", anchor, "--out", out) == 0
    t = tio.load_transforms(out)
    np.testing.assert_array_equal(t[anchor].coeffs, TransformParams.identity(ModelKind.AFFINE).coeffs)


def test_cli_prior_file(tmp_path, synth_dir):
    ds, paths = synth_dir
    out = tmp_path / "x.json"
    assert run("solve", *data_args(paths), "--prior", "file", "--priors", paths["truth"],
               "--lambda", 1e6, "--out", out) == 0
    t = tio.load_transforms(out)
    for tid, truth in ds.truth.items():
        np.testing.assert_allclose(t[tid].coeffs, truth.coeffs, rtol=1e-4, atol=1e-3)
    assert run("solve", *data_args(paths), "--prior", "file", "--out", out) == 1


def test_cli_sweep(tmp_path, synth_dir):
    _, paths = synth_dir
    out = tmp_path / "s.csv"
    assert run("sweep", *data_args(paths), "--lambdas", "1e-6..1e4", "--steps", 20,
               "--out", out) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["lambda", "mean_deformation_ratio", "mean_residual_px", "precision"]
    assert len(rows) == 21
    lams = [float(r[0]) for r in rows[1:]]
    assert lams == sorted(lams) and lams[0] == pytest.approx(1e-6) and lams[-1] == pytest.approx(1e4)
    assert run("sweep", *data_args(paths), "--lambdas", "0.1,1,10", "--out", out) == 0
    assert len(out.read_text().splitlines()) == 4


def test_cli_usage_errors(tmp_path, synth_dir, capsys):
    _, paths = synth_dir
    assert run() == 1
    assert run("solve", *data_args(paths)) == 1  # missing --out
    assert run("solve", *data_args(paths), "--model", "cubic", "--out", "x") == 1
    assert run("sweep", *data_args(paths), "--lambdas", "a..b", "--out", tmp_path / "s") == 1
    assert run("solve", *data_args(paths), "--lambda-section", "oops", "--out", "x") == 1
    assert capsys.readouterr().err


def test_cli_data_errors(tmp_path, minimal, synth_dir, capsys):
    tiles, _ = minimal
    bad = write(tmp_path / "bad.json", [{"p_tile": "a", "q_tile": "zz", "p": [[1, 1]],
                                          "q": [[1, 1]]}])
    assert run("solve", "--tiles", tiles, "--matches", bad, "--out", tmp_path / "x") == 2
    assert "zz" in capsys.readouterr().err
    assert run("solve", "--tiles", tmp_path / "nope.json", "--matches", bad,
               "--out", tmp_path / "x") == 2
    _, paths = synth_dir
    assert run("solve", *data_args(paths), "--lambda-tile", "ghost=1",
               "--out", tmp_path / "x") == 2


def test_cli_freeze_section(tmp_path):
    ds = generate(SynthConfig(grid_rows=2, grid_cols=2, sections=3, noise_sigma_px=0.5, seed=1))
    paths = tio.save_dataset(tmp_path / "v", ds.tiles, ds.matches)
    out = tmp_path / "x.json"
    assert run("solve", *data_args(paths), "--freeze-section", 1, "--out", out) == 0
    rigid_out = tmp_path / "r.json"
    assert run("rigid", *data_args(paths), "--out", rigid_out) == 0
    solved, rigid = tio.load_transforms(out), tio.load_transforms(rigid_out)
    for t in ds.tiles:
        if t.z == 1:
            d = rigid[t.tile_id].coeffs
            assert np.linalg.norm(solved[t.tile_id].coeffs - d) <= 1e-3 * np.linalg.norm(d)


def test_cli_rigid(tmp_path, synth_dir):
    ds, paths = synth_dir
    out = tmp_path / "r.json"
    assert run("rigid", *data_args(paths), "--out", out) == 0
    for t in tio.load_transforms(out).values():
        assert abs(np.linalg.det(t.linear_part()) - 1) <= 1e-9
    assert tio.load_metrics(out)["degenerate_tiles"] == []


def test_cli_synth(tmp_path):
    out = tmp_path / "s"
    assert run("synth", "--rows", 2, "--cols", 3, "--sections", 2, "--noise", 0.5,
               "--seed", 4, "--out-dir", out) == 0
    ds = tio.load_dataset(out / "tiles.json", out / "matches.json")
    assert len(ds.tiles) == 12
    assert len(tio.load_transforms(out / "truth.json")) == 12
    assert run("synth", "--overlap", 2, "--out-dir", out) == 1


def test_cli_export_and_report(tmp_path, synth_dir, capsys):
    _, paths = synth_dir
    A, b, cols = tmp_path / "A.mtx", tmp_path / "b.txt", tmp_path / "cols.json"
    assert run("export-system", *data_args(paths), "--lambda", 0.1, "--out-matrix", A,
               "--out-rhs", b, "--out-columns", cols) == 0
    assert len(json.loads(cols.read_text())["tile_order"]) == 16
    ns = import_system(A, b)
    x = solve(ns).x
    write_vector(tmp_path / "x.txt", x)
    capsys.readouterr()
    assert run("report", *data_args(paths), "--vector", tmp_path / "x.txt", "--lambda", 0.1) == 0
    external = json.loads(capsys.readouterr().out)
    assert external["precision"] <= 1e-9

    solved = tmp_path / "sol.json"
    assert run("solve", *data_args(paths), "--lambda", 0.1, "--out", solved) == 0
    capsys.readouterr()
    assert run("report", *data_args(paths), "--transforms", solved) == 0
    internal = json.loads(capsys.readouterr().out)
    assert internal["mean_residual_px"] == pytest.approx(external["mean_residual_px"], rel=1e-9)
    assert internal["tiles"] == 16 and "0" in internal["section_deformation"]


def test_cli_outputs_are_byte_identical(tmp_path, synth_dir):
    _, paths = synth_dir
    outs = []
    for name in ("a.json", "b.json"):
        assert run("solve", *data_args(paths), "--out", tmp_path / name) == 0
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]


def test_console_script_runs(tmp_path):
    env = dict(os.environ, TILEALIGN_THREADS="1")
    r = subprocess.run([sys.executable, "-m", "tilealign.cli", "synth", "--rows", "1",
                        "--cols", "2", "--out-dir", str(tmp_path)],
                       capture_output=True, text=True, env=env)
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "matches.json").exists()
