"""Null controls by convex duality, bang-bang checks and minimal time.

Controls are piecewise constant on a uniform cell schedule inside ``E``.
The dual variable is the adjoint terminal datum restricted to the first
``m`` unit velocity modes ``Phi_i = curl(e_i)/sqrt(lambda_i)``.  With the
cell averages ``vbar_k`` of the adjoint trajectory the smoothed dual is::

    J_eps(vT) = 1/2 (sum_k |cell_k| sqrt(|vbar_k|_omega^2 + eps^2))^2 + <v(0), u0>

which is the exact time discretization matching piecewise-constant
controls: for such controls ``int <f, v> dt = sum_k |cell_k| <f_k, vbar_k>``.
Its gradient is the vector of mode coefficients of the terminal state of
the forward problem driven by the candidate control, so the duality
identity holds exactly at a stationary point.

Internally the dual is re-expressed through the adjoint state at
``t_end = sup E`` and normalized by the size of the pairing vector, which
removes the ``exp(-lambda T)`` scale disparities between modes.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .geometry import RegionMask, TimeSet, VelocityField, build_time_set, masked_l2_norm
from .observability import TINY, region_gram
from .operators import OperatorSet
from .sampling import random_velocity, sample_rng, velocity_modes
from .spectral import (DEFAULT_CELLS_PER_INTERVAL, EigenBasis, ForcingSpec, _exp_integral,
                       control_cells, duality_pairing_residual, initial_amplitudes,
                       solve_adjoint, solve_stokes_forced, solve_stokes_free)

BANG_BANG_TOL = 1e-10


class SynthesisError(RuntimeError):
    pass


class BracketError(ValueError):
    def __init__(self, T_lo, T_hi, norm_lo, norm_hi, budget):
        super().__init__(
            f"horizons [{T_lo}, {T_hi}] do not bracket budget M={budget}: "
            f"minimal norms {norm_lo:.6g} at T_lo and {norm_hi:.6g} at T_hi")
        self.norms = (norm_lo, norm_hi)


@dataclass(frozen=True, eq=False)
class ControlProblem:
    u0: VelocityField
    T: float
    omega: RegionMask
    E: TimeSet
    m: int
    per_interval: int = DEFAULT_CELLS_PER_INTERVAL
    eps0: float = 0.1               # relative to the natural observation scale
    eps_floor: float = 1e-8         # relative to the same scale
    eps_factor: float = 4.0
    max_iter: int = 100             # Newton iterations per smoothing stage
    grad_tol: float = 1e-10

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"horizon must be positive, got {self.T}")
        if self.E.intervals[0][0] < 0 or self.E.end > self.T * (1 + 1e-14):
            raise ValueError("time set E must lie inside [0, T]")
        if not 1 <= self.m <= self.u0.grid.node_count:
            raise ValueError(f"mode cutoff m={self.m} outside [1, {self.u0.grid.node_count}]")
        if not (self.eps0 > self.eps_floor > 0 and self.eps_factor > 1):
            raise ValueError("smoothing schedule must decrease to a positive floor")
        if self.omega.grid != self.u0.grid:
            raise ValueError("observation region and initial state live on different grids")

    def eps_schedule(self) -> list[float]:
        eps, out = self.eps0, []
        while eps > self.eps_floor:
            out.append(eps)
            eps /= self.eps_factor
        out.append(self.eps_floor)
        return out

    def cells(self) -> tuple[np.ndarray, np.ndarray]:
        return control_cells(self.E, self.per_interval)


# -- dual functional --------------------------------------------------------

def _cell_forcing(basis, ops, problem, stream_amps_T, lo, hi):
    """Cell averages of the adjoint velocity for terminal stream amplitudes."""
    m = stream_amps_T.size
    lam = basis.eigenvalues[:m]
    rows = []
    for a, b in zip(lo, hi):
        avg = stream_amps_T * _exp_integral(lam, problem.T, a, b) / (b - a)
        rows.append(ops.C @ basis.synthesize(avg))
    return np.array(rows)


def dual_functional(basis: EigenBasis, ops: OperatorSet, problem: ControlProblem,
                    beta: np.ndarray, eps: float) -> tuple[float, np.ndarray]:
    """Value and gradient of the smoothed dual at terminal coefficients ``beta``.

    Evaluated on fields: adjoint cell averages are synthesized and measured
    on ``omega``; the gradient is read off the terminal state of one forced
    forward solve.
    """
    if not eps > 0:
        raise ValueError("smoothing parameter must be positive")
    beta = np.asarray(beta, dtype=float)
    m = beta.size
    lam = basis.eigenvalues[:m]
    scale = velocity_modes(basis, m)
    amps_T = beta * scale
    lo, hi = problem.cells()
    widths = hi - lo
    vbar = _cell_forcing(basis, ops, problem, amps_T, lo, hi)
    restricted = np.where(problem.omega.edge_mask, vbar, 0.0)
    h2 = ops.grid.h ** 2
    r = np.sqrt(h2 * np.einsum("ij,ij->i", restricted, restricted) + eps ** 2)
    S = float(widths @ r)
    v0 = VelocityField.from_flat(ops.grid, ops.C @ basis.synthesize(amps_T * np.exp(-lam * problem.T)))
    pairing = h2 * float(v0.flat() @ problem.u0.flat())
    value = 0.5 * S * S + pairing
    forcing = ForcingSpec(problem.omega, problem.E, lo, hi, S * restricted / r[:, None])
    trace = solve_stokes_forced(basis, ops, problem.u0, forcing, problem.T, [problem.T],
                                strict=False)
    gradient = basis.amplitudes(trace.psi[-1])[:m] / scale
    return value, gradient


class _DualModel:
    """Dual in normalized anchor variables ``gamma`` (adjoint state at ``t_end``)."""

    def __init__(self, basis, ops, problem: ControlProblem):
        m = problem.m
        lam = basis.eigenvalues[:m]
        self.lam = lam
        self.t_end = problem.E.end
        lo, hi = problem.cells()
        self.widths = hi - lo
        self.A = np.array([_exp_integral(lam, self.t_end, a, b) / (b - a) for a, b in zip(lo, hi)])
        self.G = region_gram(basis, ops, problem.omega, m)
        a0 = initial_amplitudes(basis, ops, problem.u0, strict=False)[:m]
        b = np.exp(-lam * self.t_end) * a0 * np.sqrt(lam)
        self.sigma = float(np.linalg.norm(b))
        self.b = b / self.sigma if self.sigma > 0 else b

    def parts(self, gamma, eps):
        X = self.A * gamma
        GX = X @ self.G
        q = np.einsum("ij,ij->i", X, GX)
        r = np.sqrt(q + eps * eps)
        S = float(self.widths @ r)
        Hk = self.A * GX
        gradS = (self.widths / r) @ Hk
        return X, GX, r, S, Hk, gradS

    def value(self, gamma, eps):
        X = self.A * gamma
        q = np.einsum("ij,ij->i", X, X @ self.G)
        S = float(self.widths @ np.sqrt(q + eps * eps))
        return 0.5 * S * S + float(self.b @ gamma)

    def value_grad_hess(self, gamma, eps):
        X, GX, r, S, Hk, gradS = self.parts(gamma, eps)
        value = 0.5 * S * S + float(self.b @ gamma)
        grad = S * gradS + self.b
        w = self.widths / r
        hessS = self.G * ((self.A * w[:, None]).T @ self.A) - (Hk * (w / r ** 2)[:, None]).T @ Hk
        hess = np.outer(gradS, gradS) + S * hessS
        return value, grad, hess

    def _ray_norm(self) -> float:
        X = -self.A * self.b
        return float(self.widths @ np.sqrt(np.maximum(np.einsum("ij,ij->i", X, X @ self.G), 0)))

    def ray_optimum(self) -> np.ndarray:
        return -self.b / self._ray_norm() ** 2

    def observation_scale(self) -> float:
        """Typical |vbar_k|_omega at the unsmoothed optimum along -b."""
        return 1.0 / (self._ray_norm() * float(self.widths.sum()))


@dataclass(frozen=True, eq=False)
class DualSolution:
    """Dual optimizer; ``anchor_coefficients`` are unit-mode coefficients of v(t_end)."""
    anchor_time: float
    anchor_coefficients: np.ndarray
    T: float
    eigenvalues: np.ndarray
    log: tuple[dict, ...] = ()
    converged: bool = True

    @property
    def terminal_coefficients(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return self.anchor_coefficients * np.exp(self.eigenvalues * (self.T - self.anchor_time))

    @property
    def is_zero(self) -> bool:
        return not np.any(self.anchor_coefficients)


def _newton_stage(model: _DualModel, gamma, eps, max_iter, tol):
    # the gradient at gamma = 0 is the unit vector b, so ``tol`` bounds the
    # terminal low-mode state relative to the uncontrolled one
    value, grad, hess = model.value_grad_hess(gamma, eps)
    it = 0
    for it in range(1, max_iter + 1):
        gnorm = np.linalg.norm(grad)
        if gnorm <= tol:
            return gamma, value, grad, it - 1, True
        try:
            step = -sla.solve(hess, grad, assume_a="pos")
        except (sla.LinAlgError, ValueError):
            step = -np.linalg.lstsq(hess, grad, rcond=None)[0]
        slope = float(grad @ step)
        if not slope < 0:
            step, slope = -grad, -float(grad @ grad)
        # near the optimum the predicted decrease drops below the roundoff of
        # J; there the gradient norm is the only informative merit function
        full_value, full_grad, full_hess = model.value_grad_hess(gamma + step, eps)
        if (abs(full_value - value) <= 1e-12 * abs(value)
                and np.linalg.norm(full_grad) < gnorm):
            gamma, value, grad, hess = gamma + step, full_value, full_grad, full_hess
            continue
        t = 1.0
        cand, cval = gamma + step, full_value
        while not (cval <= value + 1e-4 * t * slope or t < 1e-12):
            t *= 0.5
            cand = gamma + t * step
            cval = model.value(cand, eps)
        if cval > value:
            return gamma, value, grad, it, False
        gamma = cand
        value, grad, hess = model.value_grad_hess(gamma, eps)
    ok = np.linalg.norm(grad) <= tol
    return gamma, value, grad, it, ok


def minimize_dual(basis: EigenBasis, ops: OperatorSet, problem: ControlProblem) -> DualSolution:
    """Smoothed-dual minimization with eps continuation and damped Newton per stage."""
    model = _DualModel(basis, ops, problem)
    m = problem.m
    t_end = model.t_end
    if model.sigma == 0:
        return DualSolution(t_end, np.zeros(m), problem.T, model.lam, ({"stage": "trivial"},))
    scale = model.observation_scale()
    # start from the unsmoothed optimum along the steepest-descent ray
    gamma = model.ray_optimum()
    log = []
    converged = True
    for eps_rel in problem.eps_schedule():
        eps = eps_rel * scale
        gamma, value, grad, its, ok = _newton_stage(model, gamma, eps, problem.max_iter,
                                                     problem.grad_tol)
        log.append({"eps": eps_rel, "value": value, "grad_norm": float(np.linalg.norm(grad)),
                    "iterations": its, "stationary": ok})
        converged = ok
    if not converged:
        warnings.warn(f"dual minimization stopped at normalized gradient norm "
                      f"{log[-1]['grad_norm']:.3g} above tolerance {problem.grad_tol:g}")
    return DualSolution(t_end, model.sigma * gamma, problem.T, model.lam, tuple(log), converged)


# -- control construction ---------------------------------------------------

@dataclass(frozen=True, eq=False)
class ControlResult:
    forcing: ForcingSpec
    norms: np.ndarray            # |f(t_k)|_omega per cell
    M: float
    dual: DualSolution | None
    flagged: np.ndarray          # cells where the adjoint observation vanished
    report: "NullControlReport | None" = None

    @property
    def times(self) -> np.ndarray:
        return self.forcing.mid

    def with_report(self, report: "NullControlReport") -> "ControlResult":
        return ControlResult(self.forcing, self.norms, self.M, self.dual, self.flagged, report)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t", "norm_region"])
        for t, v in zip(self.times, self.norms):
            wr.writerow([repr(float(t)), repr(float(v))])
        return buf.getvalue()

    def to_dict(self) -> dict:
        out = {"M": self.M, "deviation": bang_bang_deviation(self),
               "cells": int(self.norms.size), "flagged": int(self.flagged.sum())}
        if self.dual is not None:
            out["iterations"] = int(sum(s.get("iterations", 0) for s in self.dual.log))
            out["converged"] = bool(self.dual.converged)
        if self.report is not None:
            out.update(self.report.to_dict())
        return out


def build_bangbang_control(basis: EigenBasis, ops: OperatorSet, problem: ControlProblem,
                           dual: DualSolution) -> ControlResult:
    """``f(t) = M vbar(t)|_omega / |vbar(t)|_omega`` on every cell of ``E``."""
    lo, hi = problem.cells()
    widths = hi - lo
    u0_zero = not np.any(problem.u0.flat())
    edges = 2 * ops.grid.edge_count
    if dual.is_zero:
        if not u0_zero:
            raise SynthesisError("dual optimizer vanished for a nonzero initial state")
        zero = ForcingSpec(problem.omega, problem.E, lo, hi, np.zeros((lo.size, edges)))
        return ControlResult(zero, np.zeros(lo.size), 0.0, dual, np.zeros(lo.size, bool))
    m = dual.anchor_coefficients.size
    lam = basis.eigenvalues[:m]
    anchor_amps = dual.anchor_coefficients * velocity_modes(basis, m)
    mask = problem.omega.edge_mask
    h2 = ops.grid.h ** 2
    rows = np.zeros((lo.size, edges))
    obs = np.zeros(lo.size)
    for k, (a, b) in enumerate(zip(lo, hi)):
        avg = anchor_amps * _exp_integral(lam, dual.anchor_time, a, b) / (b - a)
        v = np.where(mask, ops.C @ basis.synthesize(avg), 0.0)
        rows[k] = v
        obs[k] = math.sqrt(h2 * float(v @ v))
    flagged = obs <= TINY
    M = float(widths @ obs)
    safe = np.where(flagged, 1.0, obs)
    values = np.where(flagged[:, None], 0.0, M * rows / safe[:, None])
    forcing = ForcingSpec(problem.omega, problem.E, lo, hi, values)
    norms = np.sqrt(h2 * np.einsum("ij,ij->i", values * mask, values * mask))
    return ControlResult(forcing, norms, M, dual, flagged)


def bang_bang_deviation(result: ControlResult) -> float:
    """``(max_k - min_k |f(t_k)|_omega) / M`` over unflagged cells; 0 is perfect."""
    if result.M <= 0:
        return 0.0
    active = result.norms[~result.flagged]
    if active.size == 0:
        return 0.0
    return float((active.max() - active.min()) / result.M)


@dataclass(frozen=True)
class NullControlReport:
    rho: float                   # |u(T; f)| / |u0|
    rho_free: float              # |u(T; 0)| / |u0|
    rho_low: float               # part of rho in the first m modes
    rho_high: float              # part of rho in the remaining modes
    support_violations: int
    duality_residuals: tuple[float, ...]
    M_over_u0: float

    @property
    def duality_max(self) -> float:
        return max(self.duality_residuals) if self.duality_residuals else 0.0

    @property
    def reduction(self) -> float:
        """Terminal norm relative to the uncontrolled terminal norm."""
        return self.rho / self.rho_free if self.rho_free > 0 else 0.0

    def to_dict(self) -> dict:
        return {"rho": self.rho, "rho_free": self.rho_free, "rho_low_modes": self.rho_low,
                "rho_high_modes": self.rho_high, "reduction": self.reduction,
                "support_violations": self.support_violations,
                "duality_max": self.duality_max, "M_over_u0": self.M_over_u0}


def verify_null_control(basis: EigenBasis, ops: OperatorSet, problem: ControlProblem,
                        result: ControlResult, probes: int = 5, seed: int = 0) -> NullControlReport:
    """Run the controlled forward problem and measure what the control achieves."""
    f = result.forcing
    outside_space = int(np.count_nonzero(f.values[:, ~problem.omega.edge_mask]))
    outside_time = int(np.count_nonzero(~problem.E.contains(f.lo) | ~problem.E.contains(f.hi)))
    T = problem.T
    u0_norm = masked_l2_norm(problem.u0)
    fwd = solve_stokes_forced(basis, ops, problem.u0, f, T, [0.0, T], strict=False)
    free = solve_stokes_free(basis, ops, problem.u0, T, [0.0, T], strict=False)
    lam = basis.eigenvalues
    amps_T = basis.amplitudes(fwd.psi[-1])
    energy = lam * amps_T ** 2
    m = problem.m
    residuals = []
    for j in range(probes):
        vT = random_velocity(basis, ops, sample_rng(seed, 50_000 + j), basis.size)
        adj = solve_adjoint(basis, ops, vT, T, [0.0, T])
        residuals.append(duality_pairing_residual(fwd, adj))
    if u0_norm <= TINY:
        return NullControlReport(0.0, 0.0, 0.0, 0.0, outside_space + outside_time,
                                 tuple(residuals), 0.0)
    return NullControlReport(
        rho=fwd.norm_full[-1] / u0_norm,
        rho_free=free.norm_full[-1] / u0_norm,
        rho_low=math.sqrt(float(energy[:m].sum())) / u0_norm,
        rho_high=math.sqrt(float(energy[m:].sum())) / u0_norm,
        support_violations=outside_space + outside_time,
        duality_residuals=tuple(residuals),
        M_over_u0=result.M / u0_norm,
    )


def minimal_norm(basis: EigenBasis, ops: OperatorSet, problem: ControlProblem,
                 verify: bool = True) -> tuple[float, ControlResult]:
    """Dual minimization, bang-bang synthesis and verification.

    The returned ``M`` is the sup-in-time norm of a control that meets the
    verified terminal tolerance, hence an upper bound for the discrete
    minimal norm over piecewise-constant controls.
    """
    dual = minimize_dual(basis, ops, problem)
    result = build_bangbang_control(basis, ops, problem, dual)
    if verify:
        result = result.with_report(verify_null_control(basis, ops, problem, result))
    return result.M, result


# -- minimal time -----------------------------------------------------------

def full_window(T: float) -> TimeSet:
    return build_time_set([(0.0, T)], T)


@dataclass(frozen=True, eq=False)
class MinimalTimeResult:
    T_lo: float
    T_hi: float
    norm_lo: float
    norm_hi: float
    result_hi: ControlResult
    deviation_hi: float
    history: tuple[tuple[float, float], ...]

    def to_dict(self) -> dict:
        return {"T_lo": self.T_lo, "T_hi": self.T_hi, "norm_lo": self.norm_lo,
                "norm_hi": self.norm_hi, "deviation_hi": self.deviation_hi,
                "probes": len(self.history)}


def minimal_time_bisection(basis: EigenBasis, ops: OperatorSet, u0: VelocityField, budget: float,
                           omega: RegionMask, T_lo: float, T_hi: float,
                           E_pattern: Callable[[float], TimeSet] = full_window, m: int = 1,
                           iterations: int = 20, **problem_kw) -> MinimalTimeResult:
    """Bracket the minimal time for control budget ``budget`` by bisection on T.

    Relies on ``T -> minimal_norm(T)`` being nonincreasing.
    """
    if not budget > 0:
        raise ValueError("control budget must be positive")
    if not 0 < T_lo < T_hi:
        raise ValueError(f"need 0 < T_lo < T_hi, got {T_lo}, {T_hi}")

    def probe(T):
        problem = ControlProblem(u0, T, omega, E_pattern(T), m, **problem_kw)
        return minimal_norm(basis, ops, problem, verify=False)

    history = []
    norm_lo, res_lo = probe(T_lo)
    history.append((T_lo, norm_lo))
    if budget >= norm_lo:
        return MinimalTimeResult(T_lo, T_lo, norm_lo, norm_lo, res_lo,
                                 bang_bang_deviation(res_lo), tuple(history))
    norm_hi, res_hi = probe(T_hi)
    history.append((T_hi, norm_hi))
    if norm_hi > budget:
        raise BracketError(T_lo, T_hi, norm_lo, norm_hi, budget)
    lo, hi = T_lo, T_hi
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        norm_mid, res_mid = probe(mid)
        history.append((mid, norm_mid))
        if norm_mid <= budget:
            hi, norm_hi, res_hi = mid, norm_mid, res_mid
        else:
            lo, norm_lo = mid, norm_mid
    return MinimalTimeResult(lo, hi, norm_lo, norm_hi, res_hi, bang_bang_deviation(res_hi),
                             tuple(history))
