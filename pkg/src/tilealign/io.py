"""JSON/CSV persistence for tiles, matches, transforms and solve metrics.

Formats::

    tiles.json       [{"tile_id": ..., "z": ..., "width": ..., "height": ...}, ...]
    matches.json     [{"p_tile": ..., "q_tile": ..., "p": [[x, y], ...],
                       "q": [[x, y], ...], "w": [...]}, ...]      # "w" optional
    transforms.json  {tile_id: {"model": "affine", "coeffs": [...]}, ...}

Writers sort keys and print floats with ``repr`` (shortest round-trip), so
identical inputs give byte-identical files.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assembly import MatchSet, merge_matches
from .errors import DanglingReference, ParseError
from .model import ModelKind, TileSpec, TransformParams

logger = logging.getLogger(__name__)


@dataclass
class Dataset:
    tiles: list
    matches: list
    priors: dict = field(default_factory=dict)

    def tile_map(self) -> dict:
        return {t.tile_id: t for t in self.tiles}


def _read_json(path):
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise ParseError(path, f"line {exc.lineno}", exc.msg) from None
    except OSError as exc:
        raise ParseError(path, "-", f"cannot read file: {exc.strerror}") from None


def _write_json(path, obj) -> None:
    path = Path(path)
    try:
        path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from None


def parse_tiles(records, path="<tiles>") -> list[TileSpec]:
    if not isinstance(records, list):
        raise ParseError(path, "-", "expected a top-level array of tile records")
    tiles, seen = [], set()
    for i, rec in enumerate(records):
        try:
            t = TileSpec(str(rec["tile_id"]), int(rec["z"]), float(rec["width"]),
                         float(rec["height"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(path, i, f"bad tile record: {exc}") from None
        if t.tile_id in seen:
            raise ParseError(path, i, f"duplicate tile_id {t.tile_id!r}")
        seen.add(t.tile_id)
        tiles.append(t)
    return tiles


def parse_matches(records, path="<matches>") -> list[MatchSet]:
    if not isinstance(records, list):
        raise ParseError(path, "-", "expected a top-level array of match records")
    out = []
    for i, rec in enumerate(records):
        try:
            out.append(MatchSet(str(rec["p_tile"]), str(rec["q_tile"]),
                                np.asarray(rec["p"], dtype=float),
                                np.asarray(rec["q"], dtype=float), rec.get("w")))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(path, i, f"bad match record: {exc}") from None
    return out


def parse_transforms(obj, path="<transforms>") -> dict[str, TransformParams]:
    if not isinstance(obj, dict):
        raise ParseError(path, "-", "expected an object mapping tile_id to transform")
    out = {}
    for tid, rec in obj.items():
        try:
            out[tid] = TransformParams(ModelKind.parse(rec["model"]), rec["coeffs"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(path, tid, f"bad transform: {exc}") from None
    return dict(sorted(out.items()))


def _check_bounds(tiles, matches) -> None:
    by_id = {t.tile_id: t for t in tiles}
    for ms in matches:
        for tid, pts in ((ms.p_tile, ms.p), (ms.q_tile, ms.q)):
            t = by_id[tid]
            lim = np.array([t.width, t.height])
            if np.any(pts < -lim) or np.any(pts > 2 * lim):
                logger.warning("pair %s-%s: points of %s lie far outside the tile",
                               ms.p_tile, ms.q_tile, tid)


def load_dataset(tiles_path, matches_path, priors_path=None) -> Dataset:
    tiles = parse_tiles(_read_json(tiles_path), tiles_path)
    matches = parse_matches(_read_json(matches_path), matches_path)
    ids = {t.tile_id for t in tiles}
    for ms in matches:
        for tid in ms.key:
            if tid not in ids:
                raise DanglingReference(tid, str(matches_path))
    matches = merge_matches(matches)
    _check_bounds(tiles, matches)
    priors = {}
    if priors_path is not None:
        priors = parse_transforms(_read_json(priors_path), priors_path)
        for tid in priors:
            if tid not in ids:
                raise DanglingReference(tid, str(priors_path))
    return Dataset(sorted(tiles, key=lambda t: t.tile_id), matches, priors)


def tiles_to_json(tiles) -> list:
    return [{"tile_id": t.tile_id, "z": t.z, "width": t.width, "height": t.height}
            for t in sorted(tiles, key=lambda t: t.tile_id)]


def matches_to_json(matches) -> list:
    out = []
    for ms in matches:
        rec = {"p_tile": ms.p_tile, "q_tile": ms.q_tile,
               "p": ms.p.tolist(), "q": ms.q.tolist()}
        if not np.all(ms.w == 1.0):
            rec["w"] = ms.w.tolist()
        out.append(rec)
    return out


def transforms_to_json(transforms) -> dict:
    return {tid: {"model": t.kind.value, "coeffs": t.coeffs.tolist()}
            for tid, t in sorted(transforms.items())}


def save_dataset(directory, tiles, matches, truth=None) -> dict:
    """Write ``tiles.json``, ``matches.json`` (and ``truth.json``) into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"tiles": d / "tiles.json", "matches": d / "matches.json"}
    _write_json(paths["tiles"], tiles_to_json(tiles))
    _write_json(paths["matches"], matches_to_json(matches))
    if truth is not None:
        paths["truth"] = d / "truth.json"
        _write_json(paths["truth"], transforms_to_json(truth))
    return paths


def metrics_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".metrics.json")


METRIC_FIELDS = ("solve_seconds", "mean_residual_px", "precision", "nnz",
                 "assembly_seconds", "point_matches")


def save_transforms(path, transforms, report=None, extra: dict | None = None) -> None:
    """Write the transforms file and, with a report, its metrics sidecar."""
    _write_json(path, transforms_to_json(transforms))
    if report is not None or extra:
        metrics = dict(report.metrics()) if report is not None else {}
        metrics.update(extra or {})
        _write_json(metrics_path(path), metrics)


def load_transforms(path) -> dict[str, TransformParams]:
    return parse_transforms(_read_json(path), path)


def load_metrics(path) -> dict:
    return _read_json(metrics_path(path))
