"""Staggered curl/rot pair, five-point Laplacian and Poisson solves.

``curl`` is built from forward differences with zero extension of the
stream function beyond the boundary, and ``rot`` is defined as its exact
transpose.  Because nodes and edges carry the same quadrature weight
``h**2``, transpose and adjoint coincide, so the discrete Green formula has
no boundary term and ``rot(curl psi)`` is the five-point Dirichlet
Laplacian ``-Delta_h psi``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Grid, NodeField, VelocityField, _check_same_grid, inner

REFINE_THRESHOLD = 1e-12
STREAM_TOL = 1e-8


class NotDivergenceFreeError(ValueError):
    def __init__(self, residual: float, tol: float):
        super().__init__(
            f"velocity is not in the discrete curl range: relative residual "
            f"{residual:.3e} > {tol:.1e}")
        self.residual = residual


class FactorizationError(RuntimeError):
    pass


def difference_1d(n: int, h: float) -> sp.csr_matrix:
    """Forward difference from ``n`` interior nodes to ``n+1`` edges."""
    return ((sp.eye(n + 1, n, k=0) - sp.eye(n + 1, n, k=-1)) / h).tocsr()


@dataclass(frozen=True, eq=False)
class OperatorSet:
    grid: Grid
    C: sp.csr_matrix       # curl: nodes -> edges (comp1 stacked over comp2)
    R: sp.csr_matrix       # rot = C^T
    L: sp.csc_matrix       # R @ C, the negative five-point Laplacian
    D: sp.csr_matrix       # divergence: edges -> cells
    _lu: spla.SuperLU

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        x = self._lu.solve(rhs)
        r = rhs - self.L @ x
        scale = np.linalg.norm(rhs)
        if scale > 0 and np.linalg.norm(r) > REFINE_THRESHOLD * scale:
            x = x + self._lu.solve(r)
        return x


def build_operators(grid: Grid) -> OperatorSet:
    n, h = grid.n, grid.h
    d1 = difference_1d(n, h)
    In, In1 = sp.identity(n, format="csr"), sp.identity(n + 1, format="csr")
    C = sp.vstack([sp.kron(In, d1), -sp.kron(d1, In)]).tocsr()
    R = C.T.tocsr()
    L = (R @ C).tocsc()
    L.sum_duplicates()
    L.eliminate_zeros()
    D = sp.hstack([sp.kron(d1, In1), sp.kron(In1, d1)]).tocsr()
    try:
        lu = spla.splu(L, permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:  # singular factor
        raise FactorizationError(f"Laplacian factorization failed at n={n}") from exc
    return OperatorSet(grid, C, R, L, D, lu)


def five_point_matrix(n: int, h: float) -> np.ndarray:
    """Dense five-point Dirichlet matrix assembled entry by entry."""
    N = n * n
    A = np.zeros((N, N))
    for i in range(n):
        for j in range(n):
            k = i * n + j
            A[k, k] = 4.0 / h ** 2
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                a, b = i + di, j + dj
                if 0 <= a < n and 0 <= b < n:
                    A[k, a * n + b] = -1.0 / h ** 2
    return A


def apply_curl(ops: OperatorSet, psi: NodeField) -> VelocityField:
    _check_same_grid(ops.grid, psi.grid)
    return VelocityField.from_flat(ops.grid, ops.C @ psi.values)


def apply_rot(ops: OperatorSet, u: VelocityField) -> NodeField:
    _check_same_grid(ops.grid, u.grid)
    return NodeField(ops.grid, ops.R @ u.flat())


def apply_laplacian(ops: OperatorSet, psi: NodeField) -> NodeField:
    """``L psi`` (the negative discrete Laplacian)."""
    _check_same_grid(ops.grid, psi.grid)
    return NodeField(ops.grid, ops.L @ psi.values)


def apply_div(ops: OperatorSet, u: VelocityField) -> np.ndarray:
    """Cell-centred divergence, shape ``((n+1)**2,)``."""
    _check_same_grid(ops.grid, u.grid)
    return ops.D @ u.flat()


def poisson_solve(ops: OperatorSet, rhs: NodeField) -> NodeField:
    """Solve ``L psi = rhs`` with zero Dirichlet data."""
    _check_same_grid(ops.grid, rhs.grid)
    return NodeField(ops.grid, ops.solve(rhs.values))


class StreamRecovery(NamedTuple):
    psi: NodeField
    residual: float


def stream_from_velocity(ops: OperatorSet, u: VelocityField, strict: bool = True,
                         tol: float = STREAM_TOL) -> StreamRecovery:
    """Recover the stream function with ``curl psi = u``.

    Solves ``L psi = rot u``; for ``u`` outside the curl range this is the
    least-squares stream function, i.e. ``curl psi`` is the orthogonal
    projection of ``u`` onto divergence-free fields.  ``residual`` is
    ``|curl psi - u| / |u|``.  In strict mode a residual above ``tol`` raises
    :class:`NotDivergenceFreeError`.
    """
    _check_same_grid(ops.grid, u.grid)
    flat = u.flat()
    psi = ops.solve(ops.R @ flat)
    scale = np.linalg.norm(flat)
    residual = float(np.linalg.norm(ops.C @ psi - flat) / scale) if scale > 1e-300 else 0.0
    if strict and residual > tol:
        raise NotDivergenceFreeError(residual, tol)
    return StreamRecovery(NodeField(ops.grid, psi), residual)


def green_formula_residual(ops: OperatorSet, u: VelocityField, v: VelocityField) -> float:
    """``<curl rot u, v> - <rot u, rot v>``; the boundary term is absent."""
    _check_same_grid(u.grid, v.grid)
    w = apply_rot(ops, u)
    return inner(apply_curl(ops, w), v) - inner(w, apply_rot(ops, v))


def stencil_apply(psi: np.ndarray, n: int, h: float) -> np.ndarray:
    """Five-point ``-Delta_h`` applied by array slicing with zero padding."""
    p = np.pad(np.asarray(psi).reshape(n, n), 1)
    out = (4 * p[1:-1, 1:-1] - p[2:, 1:-1] - p[:-2, 1:-1] - p[1:-1, 2:] - p[1:-1, :-2]) / h ** 2
    return out.ravel()


def operator_identity_residuals(ops: OperatorSet, rng: np.random.Generator,
                                probes: int = 100) -> dict[str, float]:
    """Worst relative residuals of the discrete identities over random probes.

    ``adjoint``: <C psi, u> = <psi, R u>; ``rot_curl``: R C psi against an
    independent stencil; ``div_curl``: D C psi = 0 relative to |D| |C psi|;
    ``green``: <curl rot u, v> = <rot u, rot v>.
    """
    grid = ops.grid
    h2 = grid.h ** 2
    div_norm = 2 * np.sqrt(2) / grid.h
    worst = dict.fromkeys(("adjoint", "rot_curl", "div_curl", "green"), 0.0)
    for _ in range(probes):
        psi = rng.standard_normal(grid.node_count)
        u = rng.standard_normal(2 * grid.edge_count)
        v = rng.standard_normal(2 * grid.edge_count)
        Cpsi, Ru, Rv = ops.C @ psi, ops.R @ u, ops.R @ v
        lhs, rhs = h2 * (Cpsi @ u), h2 * (psi @ Ru)
        worst["adjoint"] = max(worst["adjoint"], abs(lhs - rhs) / (
            h2 * (np.linalg.norm(Cpsi) * np.linalg.norm(u) + np.linalg.norm(psi) * np.linalg.norm(Ru))))
        ref = stencil_apply(psi, grid.n, grid.h)
        worst["rot_curl"] = max(worst["rot_curl"],
                                np.linalg.norm(ops.R @ Cpsi - ref) / np.linalg.norm(ref))
        worst["div_curl"] = max(worst["div_curl"],
                                np.linalg.norm(ops.D @ Cpsi) / (div_norm * np.linalg.norm(Cpsi)))
        CRu = ops.C @ Ru
        g = h2 * (CRu @ v) - h2 * (Ru @ Rv)
        scale = h2 * (np.linalg.norm(CRu) * np.linalg.norm(v) + np.linalg.norm(Ru) * np.linalg.norm(Rv))
        worst["green"] = max(worst["green"], abs(g) / scale)
    return {k: float(x) for k, x in worst.items()}
