import numpy as np
import pytest

from tilealign.model import apply_transform, unpack
from tilealign.synth import SynthConfig, generate


def dense_lstsq_oracle(system, lam=None, B=None, d=None):
    """Brute-force least squares built from apply_transform alone.

    The residual is linear in the coefficients, so column k of the design
    matrix is residual(e_k) - residual(0); no sparse assembly code is used.
    """
    kind, order, fixed = system.kind, system.tile_order, system.fixed
    n = len(order) * kind.n_coeffs

    def resid(x):
        tr = unpack(x, order, kind)
        tr.update(fixed)
        out, w = [], []
        for ms in system.pairs:
            r = apply_transform(tr[ms.p_tile], ms.p) - apply_transform(tr[ms.q_tile], ms.q)
            out += [r[:, 0], r[:, 1]]
            w += [ms.w, ms.w]
        return np.concatenate(out), np.concatenate(w)

    r0, w = resid(np.zeros(n))
    A = np.column_stack([resid(e)[0] - r0 for e in np.eye(n)])
    M = np.sqrt(w)[:, None] * A
    rhs = -np.sqrt(w) * r0
    if lam is not None:
        M = np.vstack([M, np.diag(np.sqrt(lam) * B)])
        rhs = np.concatenate([rhs, np.sqrt(lam) * d])
    # unit-norm columns keep the SVD accurate for pixel-scale monomials
    scale = np.linalg.norm(M, axis=0)
    scale[scale == 0] = 1.0
    return np.linalg.lstsq(M / scale, rhs, rcond=None)[0] / scale


@pytest.fixture(scope="session")
def grid4():
    return generate(SynthConfig(grid_rows=4, grid_cols=4, seed=5))


@pytest.fixture(scope="session")
def grid4_noisy():
    return generate(SynthConfig(grid_rows=4, grid_cols=4, noise_sigma_px=0.5, seed=6))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
