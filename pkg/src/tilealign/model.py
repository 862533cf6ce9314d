"""Tile metadata, transformation models and coefficient packing.

Every model maps tile-local pixel coordinates ``(x, y)`` to world coordinates
``(u, v)`` through a monomial basis shared by both output coordinates::

    u = basis(x, y) . coeffs[:nb]
    v = basis(x, y) . coeffs[nb:]

The basis orderings are fixed project-wide:

=============  ===========================================
Translation    ``[1]``
RigidApprox    ``[x, y]``
Affine         ``[x, y, 1]``
Poly2          ``[x, y, 1, x^2, xy, y^2]``
Poly3          Poly2 followed by ``[x^3, x^2 y, x y^2, y^3]``
=============  ===========================================

so an affine coefficient vector reads ``(a1, a2, a0, a4, a5, a3)`` with
``u = a1 x + a2 y + a0`` and ``v = a4 x + a5 y + a3``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ModelKind",
    "TileSpec",
    "TransformParams",
    "basis_row",
    "basis_matrix",
    "apply_transform",
    "linear_area_scale",
    "param_offset",
    "coefficient_classes",
    "pack",
    "unpack",
]


class ModelKind(enum.Enum):
    TRANSLATION = "translation"
    RIGID_APPROX = "rigid_approx"
    AFFINE = "affine"
    POLY2 = "poly2"
    POLY3 = "poly3"

    @property
    def n_basis(self) -> int:
        return _N_BASIS[self]

    @property
    def n_coeffs(self) -> int:
        return 2 * _N_BASIS[self]

    @property
    def degree(self) -> int:
        return {ModelKind.POLY2: 2, ModelKind.POLY3: 3}.get(self, 1)

    @classmethod
    def parse(cls, name: str | ModelKind) -> ModelKind:
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        aliases = {"rigid": "rigid_approx", "rigidapprox": "rigid_approx"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown model kind {name!r}") from None


_N_BASIS = {
    ModelKind.TRANSLATION: 1,
    ModelKind.RIGID_APPROX: 2,
    ModelKind.AFFINE: 3,
    ModelKind.POLY2: 6,
    ModelKind.POLY3: 10,
}


@dataclass(frozen=True)
class TileSpec:
    tile_id: str
    z: int
    width: float
    height: float

    def __post_init__(self):
        if not self.tile_id:
            raise ValueError("tile_id must be a non-empty string")
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"tile {self.tile_id}: width and height must be positive")

    def corners(self) -> np.ndarray:
        w, h = self.width, self.height
        return np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])


@dataclass(frozen=True, eq=False)
class TransformParams:
    """Coefficient vector of one tile under one model (read-only)."""

    kind: ModelKind
    coeffs: np.ndarray

    def __post_init__(self):
        kind = ModelKind.parse(self.kind)
        coeffs = np.array(self.coeffs, dtype=float).reshape(-1)
        if coeffs.size != kind.n_coeffs:
            raise ValueError(
                f"{kind.value} expects {kind.n_coeffs} coefficients, got {coeffs.size}"
            )
        coeffs.flags.writeable = False
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "coeffs", coeffs)

    def __eq__(self, other):
        if not isinstance(other, TransformParams):
            return NotImplemented
        return self.kind is other.kind and np.array_equal(self.coeffs, other.coeffs)

    def __hash__(self):
        return hash((self.kind, self.coeffs.tobytes()))

    def __repr__(self):
        return f"TransformParams({self.kind.value}, {self.coeffs.tolist()})"

    @classmethod
    def identity(cls, kind: ModelKind) -> TransformParams:
        kind = ModelKind.parse(kind)
        nb = kind.n_basis
        c = np.zeros(kind.n_coeffs)
        if kind is not ModelKind.TRANSLATION:
            c[0] = 1.0  # x in u
            c[nb + 1] = 1.0  # y in v
        return cls(kind, c)

    @classmethod
    def from_affine(cls, a1, a2, a0, a4, a5, a3) -> TransformParams:
        return cls(ModelKind.AFFINE, [a1, a2, a0, a4, a5, a3])

    def linear_part(self) -> np.ndarray:
        """2x2 matrix of the degree-1 terms ``[[du/dx, du/dy], [dv/dx, dv/dy]]``."""
        if self.kind is ModelKind.TRANSLATION:
            return np.eye(2)
        nb = self.kind.n_basis
        c = self.coeffs
        return np.array([[c[0], c[1]], [c[nb], c[nb + 1]]])

    def translation_part(self) -> np.ndarray:
        k = self.kind
        if k is ModelKind.TRANSLATION:
            return self.coeffs.copy()
        if k is ModelKind.RIGID_APPROX:
            return np.zeros(2)
        nb = k.n_basis
        return np.array([self.coeffs[2], self.coeffs[nb + 2]])

    def convert(self, kind: ModelKind) -> TransformParams:
        """Re-express in another model, keeping the translation and linear
        terms and zero-filling (or dropping) the rest."""
        kind = ModelKind.parse(kind)
        if kind is self.kind:
            return self
        lin = self.linear_part()
        t = self.translation_part()
        if kind is ModelKind.TRANSLATION:
            return TransformParams(kind, t)
        if kind is ModelKind.RIGID_APPROX:
            return TransformParams(kind, [lin[0, 0], lin[0, 1], lin[1, 0], lin[1, 1]])
        nb = kind.n_basis
        c = np.zeros(kind.n_coeffs)
        c[0:3] = lin[0, 0], lin[0, 1], t[0]
        c[nb:nb + 3] = lin[1, 0], lin[1, 1], t[1]
        if self.kind.degree > 1 and kind.degree > 1:
            # carry over shared higher-order monomials
            src_nb = self.kind.n_basis
            k = min(nb, src_nb)
            c[3:k] = self.coeffs[3:k]
            c[nb + 3:nb + k] = self.coeffs[src_nb + 3:src_nb + k]
        return TransformParams(kind, c)


def basis_matrix(kind: ModelKind, pts) -> np.ndarray:
    """Evaluate the monomial basis at every row of ``pts`` (shape ``(N, 2)``)."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    x = pts[:, 0]
    y = pts[:, 1]
    one = np.ones_like(x)
    if kind is ModelKind.TRANSLATION:
        cols = [one]
    elif kind is ModelKind.RIGID_APPROX:
        cols = [x, y]
    else:
        cols = [x, y, one]
        if kind.degree >= 2:
            cols += [x * x, x * y, y * y]
        if kind.degree >= 3:
            cols += [x * x * x, x * x * y, x * y * y, y * y * y]
    return np.column_stack(cols)


def basis_row(kind: ModelKind, p) -> np.ndarray:
    return basis_matrix(kind, p)[0]


def apply_transform(t: TransformParams, pts) -> np.ndarray:
    """Map points to world coordinates. Accepts one point or an ``(N, 2)`` array."""
    arr = np.asarray(pts, dtype=float)
    single = arr.ndim == 1
    B = basis_matrix(t.kind, arr)
    nb = t.kind.n_basis
    c = t.coeffs
    if t.kind is ModelKind.TRANSLATION:
        out = arr.reshape(-1, 2) + c
    else:
        out = np.column_stack([B @ c[:nb], B @ c[nb:]])
    return out[0] if single else out


def linear_area_scale(t: TransformParams) -> float:
    """Absolute determinant of the linear part; area scale of an affine map."""
    if t.kind not in (ModelKind.AFFINE, ModelKind.RIGID_APPROX):
        raise ValueError(
            f"area scale of a {t.kind.value} transform is not constant; "
            "use regularize.deformation_ratio"
        )
    m = t.linear_part()
    return abs(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0])


def param_offset(tile_index: int, kind: ModelKind) -> range:
    if tile_index < 0:
        raise ValueError("tile_index must be >= 0")
    nc = kind.n_coeffs
    return range(tile_index * nc, (tile_index + 1) * nc)


def coefficient_classes(kind: ModelKind) -> list[str]:
    """Class label (translation/linear/quadratic/cubic) per coefficient slot."""
    if kind is ModelKind.TRANSLATION:
        per = ["translation"]
    elif kind is ModelKind.RIGID_APPROX:
        per = ["linear", "linear"]
    else:
        per = ["linear", "linear", "translation"]
        if kind.degree >= 2:
            per += ["quadratic"] * 3
        if kind.degree >= 3:
            per += ["cubic"] * 4
    return per + per


def pack(transforms, tile_order, kind: ModelKind) -> np.ndarray:
    """Concatenate per-tile coefficients (converted to ``kind``) in tile order."""
    return np.concatenate(
        [transforms[tid].convert(kind).coeffs for tid in tile_order]
    ) if tile_order else np.zeros(0)


def unpack(x, tile_order, kind: ModelKind) -> dict[str, TransformParams]:
    x = np.asarray(x, dtype=float)
    nc = kind.n_coeffs
    if x.size != nc * len(tile_order):
        raise ValueError(f"vector length {x.size} != {nc} x {len(tile_order)} tiles")
    return {
        tid: TransformParams(kind, x[i * nc:(i + 1) * nc])
        for i, tid in enumerate(tile_order)
    }


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])
