"""Exact spectral time evolution of the slip Stokes system.

Under the slip condition the vorticity ``w = rot u = L psi`` obeys the heat
equation with zero Dirichlet data, so every quantity is propagated mode by
mode in the eigenbasis of ``L``.  Forcing is piecewise constant in time and
its Duhamel integrals are evaluated in closed form.

Modal amplitudes are taken with respect to the ``h**2``-orthonormal
eigenvectors ``e_i``; a node field ``x`` has amplitudes ``<x, e_i>``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import (Grid, NodeField, RegionMask, TimeSet, VelocityField,
                       _check_same_grid, full_region, inner, masked_l2_norm)
from .operators import OperatorSet, stream_from_velocity

DENSE_MAX_N = 64
SCALE_FLOOR = 1e-300
DEFAULT_SAMPLES = 33
DEFAULT_CELLS_PER_INTERVAL = 64


class EigenSizeError(ValueError):
    pass


class ForcingSupportError(ValueError):
    pass


class TraceKindError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EigenBasis:
    grid: Grid
    eigenvalues: np.ndarray
    vectors: np.ndarray        # Euclidean-orthonormal columns
    method: str
    residual: float

    @property
    def size(self) -> int:
        return self.eigenvalues.size

    def mode(self, i: int) -> NodeField:
        """``h**2``-normalized eigenvector ``e_i`` (0-based index)."""
        return NodeField(self.grid, self.vectors[:, i] / self.grid.h)

    def amplitudes(self, values: np.ndarray) -> np.ndarray:
        """Amplitudes ``<x, e_i>`` of one node array (or rows of a 2-D array)."""
        return self.grid.h * (np.asarray(values) @ self.vectors)

    def synthesize(self, amps: np.ndarray) -> np.ndarray:
        amps = np.asarray(amps)
        m = amps.shape[-1]
        return (amps @ self.vectors[:, :m].T) / self.grid.h


def closed_form_eigenvalues(n: int) -> np.ndarray:
    """Sorted eigenvalues ``(4/h^2)(sin^2(j pi h/2) + sin^2(k pi h/2))``."""
    h = 1.0 / (n + 1)
    s = np.sin(np.arange(1, n + 1) * np.pi * h / 2) ** 2
    return np.sort((4 / h ** 2 * (s[:, None] + s[None, :])).ravel())


def eigendecompose(ops: OperatorSet) -> EigenBasis:
    grid = ops.grid
    if grid.n > DENSE_MAX_N:
        raise EigenSizeError(
            f"dense eigendecomposition limited to n <= {DENSE_MAX_N} (got n={grid.n}); "
            "use solve_stokes_free_cn for larger grids")
    A = ops.L.toarray()
    lam, V = sla.eigh(A)
    R = A @ V - V * lam
    residual = float(np.max(np.linalg.norm(R, axis=0) / lam))
    return EigenBasis(grid, lam, V, "dense-eigh", residual)


def heat_propagate(basis: EigenBasis, w0: NodeField, dt: float) -> NodeField:
    if dt < 0:
        raise ValueError(f"heat propagation needs dt >= 0, got {dt}")
    if dt == 0:
        return w0
    a = basis.amplitudes(w0.values)
    return NodeField(basis.grid, basis.synthesize(np.exp(-basis.eigenvalues * dt) * a))


# -- forcing ----------------------------------------------------------------

def control_cells(E: TimeSet, per_interval: int = DEFAULT_CELLS_PER_INTERVAL
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Uniform subdivision of each interval of ``E``; returns ``(lo, hi)``."""
    lo, hi = [], []
    for a, b in E.intervals:
        edges = np.linspace(a, b, per_interval + 1)
        lo.append(edges[:-1])
        hi.append(edges[1:])
    return np.concatenate(lo), np.concatenate(hi)


@dataclass(frozen=True, eq=False)
class ForcingSpec:
    """Velocity-valued forcing, constant on each cell ``[lo_k, hi_k)``.

    ``values`` has one row per cell holding the flattened edge data
    (comp1 then comp2).
    """
    region: RegionMask
    times: TimeSet
    lo: np.ndarray
    hi: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        lo, hi = np.array(self.lo, dtype=float), np.array(self.hi, dtype=float)
        if vals.shape != (lo.size, 2 * self.region.grid.edge_count):
            raise ValueError(f"forcing values have shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("forcing contains non-finite values")
        if np.any(hi <= lo):
            raise ValueError("forcing cells must have positive length")
        inside = np.zeros(lo.size, dtype=bool)
        for a, b in self.times.intervals:
            inside |= (lo >= a) & (hi <= b)
        if not inside.all():
            raise ForcingSupportError("forcing cells extend outside the time set E")
        off = vals[:, ~self.region.edge_mask]
        if np.any(off != 0.0):
            raise ForcingSupportError("forcing is nonzero outside the observation region")
        for arr in (vals, lo, hi):
            arr.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def mid(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    def sample(self, k: int) -> VelocityField:
        return VelocityField.from_flat(self.region.grid, self.values[k])

    @classmethod
    def zero(cls, region: RegionMask, times: TimeSet,
             per_interval: int = DEFAULT_CELLS_PER_INTERVAL) -> "ForcingSpec":
        lo, hi = control_cells(times, per_interval)
        return cls(region, times, lo, hi, np.zeros((lo.size, 2 * region.grid.edge_count)))


def _exp_integral(lam: np.ndarray, t: float, a: float, b: float) -> np.ndarray:
    """``int_a^b exp(-lam (t - s)) ds`` for ``a <= b <= t``."""
    return np.exp(-lam * (t - b)) * (-np.expm1(-lam * (b - a))) / lam


# -- traces -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SolveTrace:
    grid: Grid
    kind: str                  # "free", "forced", "adjoint" or "free-cn"
    T: float
    times: np.ndarray
    psi: np.ndarray            # (samples, nodes)
    w: np.ndarray              # (samples, nodes)
    norm_full: np.ndarray
    norm_region: np.ndarray
    region: RegionMask
    ops: OperatorSet
    basis: EigenBasis | None = None
    amps0: np.ndarray | None = None   # stream amplitudes of initial (terminal for adjoint) data
    forcing: ForcingSpec | None = None

    def stream(self, k: int) -> NodeField:
        return NodeField(self.grid, self.psi[k])

    def vorticity(self, k: int) -> NodeField:
        return NodeField(self.grid, self.w[k])

    def velocity(self, k: int) -> VelocityField:
        return VelocityField.from_flat(self.grid, self.ops.C @ self.psi[k])

    def index_of(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if not math.isclose(self.times[k], t, rel_tol=0, abs_tol=1e-12 * max(1.0, self.T)):
            raise ValueError(f"time {t} is not a sample of this trace")
        return k

    def to_csv(self) -> str:
        res = energy_residuals(self) if self.kind == "free" else np.full(self.times.size, np.nan)
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t", "norm_full", "norm_region", "energy_residual"])
        for row in zip(self.times, self.norm_full, self.norm_region, res):
            wr.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def _check_schedule(samples, T: float) -> np.ndarray:
    if samples is None:
        samples = np.linspace(0.0, T, DEFAULT_SAMPLES)
    t = np.asarray(samples, dtype=float).ravel()
    if t.size == 0 or np.any(np.diff(t) <= 0):
        raise ValueError("sample times must be strictly increasing")
    if t[0] < 0 or t[-1] > T * (1 + 1e-14):
        raise ValueError(f"sample times must lie in [0, {T}]")
    return t


def _trace_from_amps(kind, basis, ops, T, times, amps, region, amps0, forcing=None):
    grid = basis.grid
    region = full_region(grid) if region is None else region
    psi = basis.synthesize(amps)
    w = basis.synthesize(amps * basis.eigenvalues)
    norm_full = np.empty(times.size)
    norm_region = np.empty(times.size)
    for k in range(times.size):
        u = VelocityField.from_flat(grid, ops.C @ psi[k])
        norm_full[k] = masked_l2_norm(u)
        norm_region[k] = masked_l2_norm(u, region)
    return SolveTrace(grid, kind, T, times, psi, w, norm_full, norm_region, region, ops,
                      basis, amps0, forcing)


def initial_amplitudes(basis: EigenBasis, ops: OperatorSet, u0: VelocityField,
                       strict: bool = True) -> np.ndarray:
    psi0, _ = stream_from_velocity(ops, u0, strict=strict)
    return basis.amplitudes(psi0.values)


def solve_stokes_free(basis: EigenBasis, ops: OperatorSet, u0: VelocityField, T: float,
                      samples=None, region: RegionMask | None = None,
                      strict: bool = True) -> SolveTrace:
    _check_same_grid(basis.grid, u0.grid)
    times = _check_schedule(samples, T)
    a0 = initial_amplitudes(basis, ops, u0, strict)
    amps = np.exp(-np.outer(times, basis.eigenvalues)) * a0
    return _trace_from_amps("free", basis, ops, T, times, amps, region, a0)


def forcing_amplitudes(basis: EigenBasis, ops: OperatorSet, forcing: ForcingSpec) -> np.ndarray:
    """Vorticity-source amplitudes ``<rot f_k, e_i>`` per cell, shape (cells, modes)."""
    return basis.amplitudes((ops.R @ forcing.values.T).T)


def solve_stokes_forced(basis: EigenBasis, ops: OperatorSet, u0: VelocityField,
                        forcing: ForcingSpec, T: float, samples=None,
                        region: RegionMask | None = None, strict: bool = True) -> SolveTrace:
    """Duhamel solution of ``w' = -L w + rot f`` with piecewise-constant ``f``."""
    _check_same_grid(basis.grid, u0.grid)
    _check_same_grid(basis.grid, forcing.region.grid)
    if forcing.hi.max() > T * (1 + 1e-14):
        raise ForcingSupportError("forcing extends beyond the horizon")
    times = _check_schedule(samples, T)
    lam = basis.eigenvalues
    a0 = initial_amplitudes(basis, ops, u0, strict)
    g = forcing_amplitudes(basis, ops, forcing)
    amps = np.exp(-np.outer(times, lam)) * a0
    for j, t in enumerate(times):
        active = forcing.lo < t
        if not active.any():
            continue
        b = np.minimum(forcing.hi[active], t)
        a = forcing.lo[active]
        # (cells, modes): int_a^b exp(-lam (t-s)) ds
        I = np.exp(-np.outer(t - b, lam)) * (-np.expm1(-np.outer(b - a, lam))) / lam
        amps[j] += np.sum(g[active] * I, axis=0) / lam
    return _trace_from_amps("forced", basis, ops, T, times, amps, region, a0, forcing)


def solve_adjoint(basis: EigenBasis, ops: OperatorSet, vT: VelocityField, T: float,
                  samples=None, region: RegionMask | None = None,
                  strict: bool = True) -> SolveTrace:
    """Backward adjoint ``v(t) = S(T - t) vT`` (the evolution is self-adjoint)."""
    _check_same_grid(basis.grid, vT.grid)
    times = _check_schedule(samples, T)
    aT = initial_amplitudes(basis, ops, vT, strict)
    amps = np.exp(-np.outer(T - times, basis.eigenvalues)) * aT
    return _trace_from_amps("adjoint", basis, ops, T, times, amps, region, aT)


def solve_stokes_free_cn(ops: OperatorSet, u0: VelocityField, T: float, samples=None,
                         steps: int = 1000, region: RegionMask | None = None) -> SolveTrace:
    """Crank-Nicolson fallback for grids too large for dense eigenpairs.

    Accuracy is O(dt^2); not used by the machine-precision checks.
    """
    grid = ops.grid
    times = _check_schedule(samples, T)
    region = full_region(grid) if region is None else region
    psi0, _ = stream_from_velocity(ops, u0)
    dt_max = T / steps
    I = sp.identity(grid.node_count, format="csc")
    factors: dict[float, tuple] = {}
    w = ops.L @ psi0.values
    t_prev = 0.0
    W = np.empty((times.size, grid.node_count))
    for k, t in enumerate(times):
        span = t - t_prev
        if span > 0:
            nsub = max(1, int(math.ceil(span / dt_max - 1e-9)))
            dt = span / nsub
            if dt not in factors:
                factors[dt] = (spla.splu((I + 0.5 * dt * ops.L).tocsc()),
                               (I - 0.5 * dt * ops.L).tocsr())
            lu, B = factors[dt]
            for _ in range(nsub):
                w = lu.solve(B @ w)
        W[k] = w
        t_prev = t
    psi = np.array([ops.solve(row) for row in W])
    norm_full = np.empty(times.size)
    norm_region = np.empty(times.size)
    for k in range(times.size):
        u = VelocityField.from_flat(grid, ops.C @ psi[k])
        norm_full[k] = masked_l2_norm(u)
        norm_region[k] = masked_l2_norm(u, region)
    return SolveTrace(grid, "free-cn", T, times, psi, W, norm_full, norm_region, region, ops)


# -- identities -------------------------------------------------------------

def energy_residuals(trace: SolveTrace) -> np.ndarray:
    if trace.kind != "free" or trace.basis is None:
        raise TraceKindError(f"energy identity needs a spectral free trace, got {trace.kind!r}")
    lam = trace.basis.eigenvalues
    a0 = trace.amps0
    u0_sq = float(np.sum(lam * a0 ** 2))
    if u0_sq < SCALE_FLOOR:
        return np.zeros(trace.times.size)
    # int_0^s |w|^2 dt in closed form
    dissipated = np.array([np.sum(lam * a0 ** 2 * -np.expm1(-2 * lam * s)) / 2
                           for s in trace.times])
    return np.abs(trace.norm_full ** 2 + 2 * dissipated - u0_sq) / u0_sq


def energy_identity_residual(trace: SolveTrace) -> float:
    """Max over samples of ``| |u(s)|^2 + 2 int_0^s |rot u|^2 - |u0|^2 | / |u0|^2``."""
    return float(np.max(energy_residuals(trace)))


def pairing_terms(forward: SolveTrace, adjoint: SolveTrace) -> tuple[float, float, float]:
    """``(<u(T), vT>, <u0, v(0)>, int_0^T <f, v> dt)`` from two spectral traces."""
    if adjoint.kind != "adjoint" or forward.kind not in ("free", "forced"):
        raise TraceKindError("need a forward trace and an adjoint trace")
    if not math.isclose(forward.T, adjoint.T, rel_tol=1e-14):
        raise ValueError(f"horizon mismatch: {forward.T} vs {adjoint.T}")
    _check_same_grid(forward.grid, adjoint.grid)
    T = forward.T
    k0, kT = forward.index_of(0.0), forward.index_of(T)
    j0, jT = adjoint.index_of(0.0), adjoint.index_of(T)
    terminal = inner(forward.velocity(kT), adjoint.velocity(jT))
    initial = inner(forward.velocity(k0), adjoint.velocity(j0))
    source = 0.0
    f = forward.forcing
    if f is not None and np.any(f.values):
        basis, ops = adjoint.basis, adjoint.ops
        lam = basis.eigenvalues
        for k in range(f.lo.size):
            if not np.any(f.values[k]):
                continue
            # time integral of the adjoint stream over the cell, then curl
            phi_int = basis.synthesize(adjoint.amps0 * _exp_integral(lam, T, f.lo[k], f.hi[k]))
            v_int = ops.C @ phi_int
            source += forward.grid.h ** 2 * float(np.dot(f.values[k], v_int))
    return terminal, initial, source


def duality_pairing_residual(forward: SolveTrace, adjoint: SolveTrace) -> float:
    """Relative defect of ``<u(T), vT> - <u0, v(0)> = int_0^T <f, v> dt``.

    The scale is the sum of the magnitudes of the three terms.
    """
    terminal, initial, source = pairing_terms(forward, adjoint)
    scale = abs(terminal) + abs(initial) + abs(source)
    if scale < SCALE_FLOOR:
        return 0.0
    return abs(terminal - initial - source) / scale
