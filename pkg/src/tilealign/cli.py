"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 solver failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import io as tio
from .assembly import build_normal_equations, build_system, tile_transforms
from .errors import DataError, SolverError
from .model import ModelKind, TransformParams, pack
from .pipeline import build_prior, section_deformation, solve_dataset
from .regularize import (FROZEN, LambdaSpec, deformation_ratio, log_lambdas, sweep_lambda,
                         write_sweep_csv)
from .rigid_prior import estimate_rigid_prior
from .solvers import SolverConfig, export_system, import_solution, residual_stats
from .synth import SynthConfig, generate

logger = logging.getLogger("tilealign")

THREADS_ENV = "TILEALIGN_THREADS"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SOLVER = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_data_args(p, priors=False):
    p.add_argument("--tiles", required=True, help="tiles JSON file")
    p.add_argument("--matches", required=True, help="matches JSON file")
    if priors:
        p.add_argument("--priors", help="transforms JSON used with --prior file")
    p.add_argument("--min-matches", type=int, default=1,
                   help="drop tile pairs with fewer point-matches")
    p.add_argument("--max-matches", type=int, default=None,
                   help="subsample tile pairs with more point-matches")


def _add_lambda_args(p, default=1.0):
    p.add_argument("--lambda", dest="lam", type=float, default=default,
                   help="default regularization weight (default %(default)s)")
    for cls in ("translation", "linear", "quadratic", "cubic"):
        p.add_argument(f"--lambda-{cls}", type=float, default=None,
                       help=f"weight for {cls} coefficients")
    p.add_argument("--lambda-section", action="append", default=[], metavar="Z=VALUE",
                   help="per-section weight; VALUE may be 'frozen' (repeatable)")
    p.add_argument("--lambda-tile", action="append", default=[], metavar="ID=VALUE",
                   help="per-tile weight; VALUE may be 'frozen' (repeatable)")
    p.add_argument("--freeze-section", action="append", type=int, default=[], metavar="Z",
                   help="shorthand for --lambda-section Z=frozen")
    p.add_argument("--frozen-multiplier", type=float, default=1e8)


def _add_solver_args(p):
    p.add_argument("--backend", default="direct",
                   choices=["direct", "cg", "bicgstab", "gmres", "backslash"])
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--max-iter", type=int, default=None)
    p.add_argument("--restart", type=int, default=50)
    p.add_argument("--no-precondition", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tilealign", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--threads", type=int, default=None,
                        help=f"BLAS thread limit (default ${THREADS_ENV} or library default)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("solve", help="solve tile transforms")
    _add_data_args(p, priors=True)
    p.add_argument("--model", default="affine",
                   choices=["translation", "affine", "poly2", "poly3"])
    _add_lambda_args(p)
    _add_solver_args(p)
    p.add_argument("--prior", choices=["rigid", "file"], default="rigid")
    p.add_argument("--fix-tile", action="append", default=[], metavar="ID",
                   help="eliminate this tile's columns, holding it at its prior "
                        "(identity when no prior file)")
    p.add_argument("--out", required=True, help="output transforms JSON")

    p = sub.add_parser("rigid", help="rigid-approximation transforms only")
    _add_data_args(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="solve over a range of lambda values")
    _add_data_args(p, priors=True)
    p.add_argument("--model", default="affine",
                   choices=["translation", "affine", "poly2", "poly3"])
    _add_lambda_args(p, default=1.0)
    _add_solver_args(p)
    p.add_argument("--prior", choices=["rigid", "file"], default="rigid")
    p.add_argument("--lambdas", required=True,
                   help="comma list (1e-3,1,10) or log range LO..HI")
    p.add_argument("--steps", type=int, default=20, help="points for a LO..HI range")
    p.add_argument("--out", required=True, help="output CSV")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--rows", type=int, default=4)
    p.add_argument("--cols", type=int, default=4)
    p.add_argument("--sections", type=int, default=1)
    p.add_argument("--tile-size", type=float, nargs=2, default=(400.0, 400.0),
                   metavar=("W", "H"))
    p.add_argument("--overlap", type=float, default=0.1)
    p.add_argument("--matches-per-pair", type=int, default=20)
    p.add_argument("--noise", type=float, default=0.0, help="point noise sigma [px]")
    p.add_argument("--truth-model", default="affine", choices=["affine", "poly2", "poly3"])
    p.add_argument("--rotation-deg", type=float, default=1.0)
    p.add_argument("--translation-px", type=float, default=4.0)
    p.add_argument("--linear-scale", type=float, default=0.01)
    p.add_argument("--nonlinear-px", type=float, default=0.0)
    p.add_argument("--cross-span", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("export-system", help="write the normal equations for an external solver")
    _add_data_args(p, priors=True)
    p.add_argument("--model", default="affine",
                   choices=["translation", "affine", "poly2", "poly3"])
    _add_lambda_args(p)
    p.add_argument("--prior", choices=["rigid", "file"], default="rigid")
    p.add_argument("--out-matrix", required=True, help="Matrix Market file")
    p.add_argument("--out-rhs", required=True, help="right-hand side, one value per line")
    p.add_argument("--out-columns", help="tile order of the columns (JSON)")

    p = sub.add_parser("report", help="metrics of an existing solution")
    _add_data_args(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--transforms", help="transforms JSON")
    src.add_argument("--vector", help="plain-text solution vector from an external solver")
    p.add_argument("--model", default="affine",
                   choices=["translation", "affine", "poly2", "poly3"],
                   help="model of --vector")
    _add_lambda_args(p)
    p.add_argument("--prior", choices=["rigid", "file"], default="rigid")
    p.add_argument("--priors")
    return parser


def _kv(items, key_type, flag):
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"{flag} expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        try:
            k = key_type(k)
            v = FROZEN if v == FROZEN else float(v)
        except ValueError:
            raise UsageError(f"{flag}: cannot parse {item!r}") from None
        out[k] = v
    return out


def lambda_spec_from_args(args) -> LambdaSpec:
    per_class = {c: getattr(args, f"lambda_{c}") for c in
                 ("translation", "linear", "quadratic", "cubic")
                 if getattr(args, f"lambda_{c}") is not None}
    per_section = _kv(args.lambda_section, int, "--lambda-section")
    per_section.update({z: FROZEN for z in args.freeze_section})
    per_tile = _kv(args.lambda_tile, str, "--lambda-tile")
    return LambdaSpec(args.lam, per_class, per_section, per_tile, args.frozen_multiplier)


def solver_config_from_args(args) -> SolverConfig:
    return SolverConfig(args.backend, args.tol, args.max_iter, args.restart,
                        not args.no_precondition)


def parse_lambdas(text: str, steps: int) -> list[float]:
    try:
        if ".." in text:
            lo, hi = (float(v) for v in text.split("..", 1))
            return log_lambdas(lo, hi, steps)
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse lambda list {text!r}") from None


def _load(args):
    priors = getattr(args, "priors", None)
    if getattr(args, "prior", None) == "file" and not priors:
        raise UsageError("--prior file requires --priors")
    return tio.load_dataset(args.tiles, args.matches, priors)


def _prior_source(args, ds):
    return ds.priors if args.prior == "file" else "rigid"


def cmd_solve(args) -> int:
    ds = _load(args)
    kind = ModelKind.parse(args.model)
    spec = lambda_spec_from_args(args)
    fixed = None
    if args.fix_tile:
        fixed = {tid: ds.priors.get(tid, TransformParams.identity(kind)).convert(kind)
                 for tid in args.fix_tile}
    sol = solve_dataset(ds.tiles, ds.matches, kind, spec, solver_config_from_args(args),
                        _prior_source(args, ds), fixed, args.min_matches, args.max_matches)
    tio.save_transforms(args.out, sol.transforms, sol.report, {
        "mean_residual_px": sol.residuals.global_mean,
        "point_matches": sol.system.n_point_matches,
        "mean_deformation_ratio": deformation_ratio(
            [t for t in ds.tiles if t.tile_id in sol.transforms], sol.transforms, kind).mean,
        "model": kind.value,
    })
    logger.info("solved %d tiles: precision %.3g, mean residual %.4g px",
                len(sol.transforms), sol.report.precision, sol.residuals.global_mean)
    if not sol.report.converged:
        print(f"warning: {sol.report.backend} did not converge ({sol.report.status})",
              file=sys.stderr)
    return EXIT_OK


def cmd_rigid(args) -> int:
    ds = _load(args)
    rigid = estimate_rigid_prior(ds.tiles, ds.matches, max(args.min_matches, 2),
                                 args.max_matches)
    transforms = rigid.transforms()
    system = build_system(ds.tiles, ds.matches, ModelKind.AFFINE, args.min_matches,
                          args.max_matches)
    x = pack(transforms, system.tile_order, ModelKind.AFFINE)
    tio.save_transforms(args.out, transforms, None, {
        "mean_residual_px": residual_stats(system, x).global_mean,
        "point_matches": system.n_point_matches,
        "nnz": system.nnz,
        "degenerate_tiles": rigid.degenerate,
        "model": "affine",
    })
    return EXIT_OK


def cmd_sweep(args) -> int:
    ds = _load(args)
    kind = ModelKind.parse(args.model)
    lambdas = parse_lambdas(args.lambdas, args.steps)
    if not lambdas or any(v <= 0 for v in lambdas):
        raise UsageError("--lambdas must be positive")
    system = build_system(ds.tiles, ds.matches, kind, args.min_matches, args.max_matches)
    pv, _ = build_prior(ds.tiles, ds.matches, system, kind, lambda_spec_from_args(args),
                        _prior_source(args, ds), args.min_matches, args.max_matches)
    rows = sweep_lambda(system, pv, lambdas, ds.tiles, solver_config_from_args(args))
    write_sweep_csv(args.out, rows)
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        cfg = SynthConfig(args.rows, args.cols, args.sections, args.tile_size[0],
                          args.tile_size[1], args.overlap, args.matches_per_pair, args.noise,
                          ModelKind.parse(args.truth_model), args.rotation_deg,
                          args.translation_px, args.linear_scale, args.nonlinear_px,
                          cross_section_span=args.cross_span, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ds = generate(cfg)
    tio.save_dataset(args.out_dir, ds.tiles, ds.matches, ds.truth)
    return EXIT_OK


def _normal_system(args, ds, kind):
    system = build_system(ds.tiles, ds.matches, kind, args.min_matches, args.max_matches)
    pv, _ = build_prior(ds.tiles, ds.matches, system, kind, lambda_spec_from_args(args),
                        _prior_source(args, ds), args.min_matches, args.max_matches)
    return system, build_normal_equations(system, pv.lambda_diag, pv.B_diag, pv.d)


def cmd_export(args) -> int:
    ds = _load(args)
    kind = ModelKind.parse(args.model)
    system, ns = _normal_system(args, ds, kind)
    export_system(ns, args.out_matrix, args.out_rhs)
    if args.out_columns:
        Path(args.out_columns).write_text(json.dumps(
            {"model": kind.value, "tile_order": list(system.tile_order)}, indent=1) + "\n",
            encoding="utf-8")
    return EXIT_OK


def cmd_report(args) -> int:
    ds = _load(args)
    out = {}
    if args.transforms:
        transforms = tio.load_transforms(args.transforms)
        kind = next(iter(transforms.values())).kind
        system = build_system(ds.tiles, ds.matches, kind, args.min_matches, args.max_matches)
        x = pack(transforms, system.tile_order, kind)
    else:
        kind = ModelKind.parse(args.model)
        system, ns = _normal_system(args, ds, kind)
        rep = import_solution(args.vector, ns)
        x = rep.x
        out["precision"] = rep.precision
        transforms = tile_transforms(system, x)
    res = residual_stats(system, x)
    tiles = [t for t in ds.tiles if t.tile_id in transforms]
    out.update({
        "model": kind.value,
        "tiles": len(tiles),
        "point_matches": system.n_point_matches,
        "nnz": system.nnz,
        "mean_residual_px": res.global_mean,
        "mean_deformation_ratio": deformation_ratio(tiles, transforms, kind).mean,
        "section_deformation": {str(z): v for z, v in
                                section_deformation(tiles, transforms).items()},
    })
    print(json.dumps(out, sort_keys=True, indent=1))
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "rigid": cmd_rigid,
    "sweep": cmd_sweep,
    "synth": cmd_synth,
    "export-system": cmd_export,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required; see --help")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads
    if threads is None and os.environ.get(THREADS_ENV):
        threads = int(os.environ[THREADS_ENV])
    try:
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"tilealign: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, KeyError, ValueError) as exc:
        print(f"tilealign: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SolverError as exc:
        print(f"tilealign: solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"tilealign: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
