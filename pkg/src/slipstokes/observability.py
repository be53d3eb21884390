"""Measured versions of the unique-continuation and observability estimates.

Everything here is a measurement on exact spectral solutions: gradient
energy and its analytic time derivatives, the log-convexity margin, the
interpolation/smoothing chain behind the three-ball inequality, fitted
constants ``(N, alpha)`` and lower bounds for the observability constant.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .geometry import NodeField, RegionMask, TimeSet, VelocityField, masked_l2_norm
from .operators import OperatorSet
from .sampling import random_velocity, sample_rng, velocity_modes
from .spectral import EigenBasis, initial_amplitudes, solve_stokes_free

TINY = 1e-300
CHAIN_RTOL = 1e-12
ALPHA_GRID = tuple(np.round(np.arange(1, 20) * 0.05, 2))
SIMPSON_TOL = 1e-9


class ZeroEnergyError(ValueError):
    pass


class ObservabilityDegenerateError(ValueError):
    pass


class UCFitError(ValueError):
    pass


# -- gradient energy --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EnergySeries:
    """``e = <psi, L psi>``, ``de = -2 <w, w>``, ``dde = 4 <w, L w>``."""
    times: np.ndarray
    e: np.ndarray
    de: np.ndarray
    dde: np.ndarray


def energy_series(basis: EigenBasis, ops: OperatorSet, psi0: NodeField, times) -> EnergySeries:
    times = np.asarray(times, dtype=float)
    lam = basis.eigenvalues
    a = basis.amplitudes(psi0.values)
    p = a ** 2 * np.exp(-2 * np.outer(times, lam))
    return EnergySeries(times, p @ lam, -2 * (p @ lam ** 2), 4 * (p @ lam ** 3))


def log_convexity_margin(series: EnergySeries) -> float:
    """``min_t (dde*e - de^2) / (dde*e)``; the inequality says this is >= 0."""
    if np.any(series.e <= 0):
        raise ZeroEnergyError("log-convexity margin needs positive gradient energy")
    prod = series.dde * series.e
    return float(np.min((prod - series.de ** 2) / (prod + TINY)))


def gradient_energy_monotonicity(series: EnergySeries, rtol: float = 1e-12) -> bool:
    """True iff ``e`` never increases and ``e(T) = 0`` forces ``e(0) = 0``."""
    e = series.e
    nonincreasing = bool(np.all(e[1:] <= e[:-1] * (1 + rtol)))
    backward_unique = not (e[-1] == 0 and e[0] != 0)
    return nonincreasing and backward_unique


# -- interpolation chain ----------------------------------------------------

class ChainCheck(NamedTuple):
    lhs: float
    rhs: float
    satisfied: bool


def _holds(lhs: float, rhs: float) -> ChainCheck:
    return ChainCheck(lhs, rhs, bool(lhs <= rhs * (1 + CHAIN_RTOL) + TINY))


def _quad(ops: OperatorSet, x: np.ndarray, y: np.ndarray | None = None) -> float:
    """``<x, L y>`` with the h^2 weight."""
    y = x if y is None else y
    return ops.grid.h ** 2 * float(x @ (ops.L @ y))


def _sq(ops: OperatorSet, x: np.ndarray) -> float:
    return ops.grid.h ** 2 * float(x @ x)


def interpolation_chain_check(basis: EigenBasis, ops: OperatorSet, psi0: NodeField,
                              t1: float, t2: float, omega: RegionMask | None = None
                              ) -> dict[str, ChainCheck | float]:
    """Check the smoothing and interpolation bounds between ``t1`` and ``t2``.

    With ``t3 = (t1 + t2)/2``, ``I1 = |grad Lap psi(t3)|`` and
    ``I2 = |grad psi(t3)|``:

    * ``a``: ``I1 <= |grad psi(t1)| / (t3 - t1)``
    * ``b``: ``|Lap psi(t3)|^2 <= I1 * I2``
    * ``c``: ``|grad psi(t2)|^2 <= |Lap psi(t2)|^2 / lambda_1``

    plus the two intermediate smoothing steps and the bound on
    ``|grad Lap psi(t2)|`` that controls the local H^2 term.
    """
    if not t2 > t1 or t1 < 0:
        raise ValueError(f"need 0 <= t1 < t2, got t1={t1}, t2={t2}")
    t3 = 0.5 * (t1 + t2)
    tm = 0.5 * (t1 + t3)
    lam = basis.eigenvalues
    a0 = basis.amplitudes(psi0.values)

    def stream(t):
        return basis.synthesize(np.exp(-lam * t) * a0)

    psi1, psi3, psim, psi2 = stream(t1), stream(t3), stream(tm), stream(t2)
    w3, wm, w2 = ops.L @ psi3, ops.L @ psim, ops.L @ psi2
    grad1_sq = _quad(ops, psi1)
    I1_sq = _quad(ops, w3)
    I2_sq = _quad(ops, psi3)
    tau = t3 - t1
    report: dict[str, ChainCheck | float] = {
        "t3": t3,
        "I1": math.sqrt(I1_sq),
        "I2": math.sqrt(I2_sq),
        "a": _holds(math.sqrt(I1_sq), math.sqrt(grad1_sq) / tau),
        "b": _holds(_sq(ops, w3), math.sqrt(I1_sq * I2_sq)),
        "c": _holds(_quad(ops, psi2), _sq(ops, w2) / lam[0]),
        "smoothing_step_1": _holds(I1_sq, _sq(ops, wm) / tau),
        "smoothing_step_2": _holds(_sq(ops, wm), grad1_sq / tau),
        "i3_bound": _holds(_quad(ops, w2), grad1_sq / (t2 - t1) ** 2),
    }
    if omega is not None:
        u2 = VelocityField.from_flat(ops.grid, ops.C @ psi2)
        report["grad_t2_region"] = masked_l2_norm(u2, omega)
    return report


def chain_satisfied(report: dict) -> bool:
    return all(v.satisfied for v in report.values() if isinstance(v, ChainCheck))


# -- three-ball quotients and (N, alpha) fits -------------------------------

@dataclass(frozen=True)
class UCRecord:
    seed: int
    t1: float
    t2: float
    norm_t1: float          # |u(t1)| over the domain
    norm_t2: float          # |u(t2)| over the domain
    norm_t2_region: float   # |u(t2)| over omega

    def quotient(self, alpha: float) -> float:
        return self.norm_t2 / (self.norm_t2_region ** alpha * self.norm_t1 ** (1 - alpha))

    def log_target(self, alpha: float) -> float:
        """``log(N e^{N/(t2-t1)})`` needed for this record at exponent ``alpha``."""
        return (math.log(self.norm_t2) - (1 - alpha) * math.log(self.norm_t1)) / alpha \
            - math.log(self.norm_t2_region)


def _two_time_norms(basis, ops, u0, t1, t2, omega):
    if not t2 > t1 or t1 < 0:
        raise ValueError(f"need 0 <= t1 < t2, got t1={t1}, t2={t2}")
    tr = solve_stokes_free(basis, ops, u0, t2, [t1, t2], region=omega)
    return tr.norm_full[0], tr.norm_full[1], tr.norm_region[1]


def three_ball_quotient(basis: EigenBasis, ops: OperatorSet, u0: VelocityField, t1: float,
                        t2: float, omega: RegionMask, alpha: float) -> float:
    """``|u(t2)| / (|u(t2)|_omega^alpha |u(t1)|^(1-alpha))``."""
    n1, n2, n2w = _two_time_norms(basis, ops, u0, t1, t2, omega)
    if n2w <= TINY:
        raise ObservabilityDegenerateError("observation norm |u(t2)|_omega vanishes")
    return n2 / (n2w ** alpha * n1 ** (1 - alpha))


def uc_sample_times(seed: int, index: int, T: float) -> tuple[float, float]:
    """Draw ``t1 ~ U(0, T/2)`` and ``t2 ~ U(t1 + T/50, T)`` for sample ``index``."""
    rng = sample_rng(seed, 1_000_003 + index)
    t1 = rng.uniform(0.0, 0.5 * T)
    t2 = rng.uniform(t1 + 0.02 * T, T)
    return float(t1), float(t2)


def uc_sample_batch(seed: int, count: int, T: float, start: int = 0) -> list[tuple[int, float, float]]:
    """``count`` sample specs ``(index, t1, t2)``; indices double as field seeds."""
    return [(i, *uc_sample_times(seed, i, T)) for i in range(start, start + count)]


def evaluate_uc_samples(basis: EigenBasis, ops: OperatorSet,
                        samples: Iterable[tuple[int, float, float]], omega: RegionMask,
                        seed: int = 0, m: int | None = None) -> list[UCRecord]:
    records = []
    for index, t1, t2 in samples:
        u0 = random_velocity(basis, ops, sample_rng(seed, index), m)
        n1, n2, n2w = _two_time_norms(basis, ops, u0, t1, t2, omega)
        records.append(UCRecord(int(index), float(t1), float(t2), n1, n2, n2w))
    return records


def _min_constant(target: float, gap: float) -> float:
    """Smallest ``N`` with ``log N + N/gap >= target`` (bisection in log N)."""
    def g(x):
        return x + math.exp(x) / gap

    lo = min(target, 0.0) - 1.0
    while g(lo) >= target:
        lo -= 2 * abs(lo) + 1
    hi = max(target, 0.0) + 1.0
    while g(hi) < target:
        hi += 2 * abs(hi) + 1
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if g(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * max(1.0, abs(hi)):
            break
    return math.exp(hi)


@dataclass(frozen=True)
class UCFit:
    alpha: float
    N: float
    records: tuple[UCRecord, ...]
    per_alpha: dict = field(default_factory=dict)   # alpha -> minimal N
    excluded: tuple[int, ...] = ()
    method: str = "alpha-grid+bisection"

    def satisfies(self, r: UCRecord) -> bool:
        gap = r.t2 - r.t1
        lhs = math.log(r.norm_t2)
        rhs = (self.alpha * (math.log(self.N) + self.N / gap + math.log(r.norm_t2_region))
               + (1 - self.alpha) * math.log(r.norm_t1))
        return lhs <= rhs + 1e-12 * max(1.0, abs(lhs))

    def violations(self, records: Iterable[UCRecord]) -> list[UCRecord]:
        return [r for r in records if not self.satisfies(r)]

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "N": self.N, "sample_count": len(self.records),
                "excluded": list(self.excluded), "method": self.method,
                "per_alpha": {repr(a): n for a, n in self.per_alpha.items()}}


def fit_uc_records(records: Sequence[UCRecord], alphas: Sequence[float] = ALPHA_GRID,
                   min_samples: int = 10) -> UCFit:
    usable = [r for r in records if r.norm_t2_region > TINY and r.norm_t1 > TINY]
    excluded = tuple(r.seed for r in records if r not in usable)
    if excluded:
        warnings.warn(f"excluded {len(excluded)} samples with vanishing norms: {excluded}")
    if not usable:
        raise UCFitError("every sample has a vanishing observation norm")
    if len(records) < min_samples:
        raise UCFitError(f"need at least {min_samples} samples, got {len(records)}")
    per_alpha = {}
    for alpha in alphas:
        per_alpha[float(alpha)] = max(_min_constant(r.log_target(alpha), r.t2 - r.t1)
                                      for r in usable)
    best = min(per_alpha, key=lambda a: (per_alpha[a], a))
    return UCFit(best, per_alpha[best], tuple(usable), per_alpha, excluded)


def fit_uc_constants(basis: EigenBasis, ops: OperatorSet,
                     samples: Sequence[tuple[int, float, float]], omega: RegionMask,
                     seed: int = 0, m: int | None = None,
                     alphas: Sequence[float] = ALPHA_GRID) -> UCFit:
    """Fit ``(N, alpha)`` so every sample obeys the three-ball inequality.

    For each ``alpha`` on the grid the smallest admissible ``N`` is found per
    sample by bisection (the requirement is monotone in ``N``); the maximum
    over samples is that alpha's constant, and the alpha with the smallest
    constant wins.
    """
    if len(samples) < 10:
        raise UCFitError(f"need at least 10 samples, got {len(samples)}")
    return fit_uc_records(evaluate_uc_samples(basis, ops, samples, omega, seed, m), alphas)


# -- observability ratio ----------------------------------------------------

def adaptive_simpson(f, a: float, b: float, tol: float, max_depth: int = 50) -> float:
    """Adaptive Simpson quadrature with absolute tolerance ``tol``."""
    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)
    whole = (b - a) * (fa + 4 * fm + fb) / 6

    def rec(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = (m - a) * (fa + 4 * flm + fm) / 6
        right = (b - m) * (fm + 4 * frm + fb) / 6
        delta = left + right - whole
        if depth <= 0 or abs(delta) <= 15 * tol:
            return left + right + delta / 15
        return (rec(a, m, fa, flm, fm, left, tol / 2, depth - 1)
                + rec(m, b, fm, frm, fb, right, tol / 2, depth - 1))

    return rec(a, b, fa, fm, fb, whole, tol, max_depth)


def _integrate_rel(f, E: TimeSet, rtol: float) -> float:
    # coarse pass for the scale, then a pass at the requested relative tolerance
    rough = sum(adaptive_simpson(f, a, b, 1e-3 * (b - a) * abs(f(b)) + TINY) for a, b in E.intervals)
    tol = rtol * abs(rough) + TINY
    total = 0.0
    for a, b in E.intervals:
        total += adaptive_simpson(f, a, b, tol * (b - a) / E.measure)
    return total


def observability_ratio(basis: EigenBasis, ops: OperatorSet, vT: VelocityField, T: float,
                        omega: RegionMask, E: TimeSet, rtol: float = SIMPSON_TOL) -> float:
    """``|v(0)| / int_E |v(t)|_omega dt`` for the adjoint started from ``vT``."""
    lam = basis.eigenvalues
    aT = initial_amplitudes(basis, ops, vT)
    v0_norm = math.sqrt(float(np.sum(lam * (np.exp(-lam * T) * aT) ** 2)))

    def obs(t):
        psi = basis.synthesize(np.exp(-lam * (T - t)) * aT)
        return masked_l2_norm(VelocityField.from_flat(ops.grid, ops.C @ psi), omega)

    denom = _integrate_rel(obs, E, rtol)
    if denom <= TINY:
        raise ObservabilityDegenerateError("observation integral vanishes (vT = 0?)")
    return v0_norm / denom


def region_gram(basis: EigenBasis, ops: OperatorSet, omega: RegionMask, m: int) -> np.ndarray:
    """Gram matrix of the first ``m`` unit velocity modes over ``omega``."""
    amps = np.diag(velocity_modes(basis, m))
    U = (ops.C @ basis.synthesize(amps).T)[omega.edge_mask]
    return ops.grid.h ** 2 * (U.T @ U)


def graded_gauss_rule(E: TimeSet, rate: float, order: int = 16, growth: float = 1.3
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre nodes/weights on ``E`` refined toward the right ends.

    Suited to sums of ``exp(rate * t)`` with rates up to ``rate``.
    """
    x, w = np.polynomial.legendre.leggauss(order)
    nodes, weights = [], []
    for a, b in E.intervals:
        width = min(b - a, 1.0 / rate)
        right = b
        while right > a:
            left = max(a, right - width)
            half = 0.5 * (right - left)
            nodes.append(left + half * (x + 1))
            weights.append(half * w)
            right = left
            width *= growth
    return np.concatenate(nodes), np.concatenate(weights)


class _RatioModel:
    """Log of the observability ratio over unit-mode coefficients, with gradient."""

    def __init__(self, basis, ops, T, omega, E, m):
        lam = basis.eigenvalues[:m]
        self.decay0 = np.exp(-lam * T)
        self.G = region_gram(basis, ops, omega, m)
        t, self.wq = graded_gauss_rule(E, lam[-1])
        self.d = np.exp(-np.outer(T - t, lam))    # (nodes, m)

    def value_grad(self, beta):
        n0 = beta * self.decay0
        num_sq = n0 @ n0
        X = self.d * beta                          # (nodes, m)
        GX = X @ self.G
        q = np.maximum(np.einsum("ij,ij->i", X, GX), TINY)
        s = np.sqrt(q)
        denom = self.wq @ s
        val = 0.5 * math.log(num_sq) - math.log(denom)
        grad = n0 * self.decay0 / num_sq - ((self.wq / s) @ (self.d * GX)) / denom
        return val, grad


@dataclass(frozen=True, eq=False)
class ObservabilityEstimate:
    ratio: float                 # best ratio, re-evaluated by adaptive Simpson
    vT: VelocityField
    coefficients: np.ndarray     # unit velocity-mode coefficients of vT
    start_ratios: np.ndarray
    dominant_mode: int           # 0-based index of the largest coefficient
    iterations: np.ndarray

    @property
    def dispersion(self) -> float:
        return float(np.max(self.start_ratios) / np.median(self.start_ratios))

    def to_dict(self) -> dict:
        return {"ratio": self.ratio, "dispersion": self.dispersion,
                "dominant_mode": self.dominant_mode,
                "start_ratios": [float(r) for r in self.start_ratios],
                "iterations": [int(k) for k in self.iterations]}


def _ascend(model: _RatioModel, beta: np.ndarray, max_iter: int) -> tuple[np.ndarray, float, int]:
    beta = beta / np.linalg.norm(beta)
    val, grad = model.value_grad(beta)
    step = 1.0
    for it in range(1, max_iter + 1):
        g = grad - (grad @ beta) * beta
        gn = np.linalg.norm(g)
        if gn < 1e-12:
            return beta, val, it
        while step > 1e-14:
            cand = beta + step * g / gn
            cand /= np.linalg.norm(cand)
            cval, cgrad = model.value_grad(cand)
            if cval > val:
                break
            step *= 0.5
        else:
            return beta, val, it
        improvement = cval - val
        beta, val, grad = cand, cval, cgrad
        step = min(2 * step, 1.0)
        if improvement < 1e-13:
            return beta, val, it
    return beta, val, max_iter


def estimate_observability_constant(basis: EigenBasis, ops: OperatorSet, T: float,
                                    omega: RegionMask, E: TimeSet, m: int,
                                    starts: int = 20, max_iter: int = 500,
                                    seed: int = 0) -> ObservabilityEstimate:
    """Lower bound for the discrete observability constant on the first ``m`` modes.

    Multi-start projected gradient ascent of the log ratio on the unit
    sphere of mode coefficients.  The ratio is not concave, so the result is
    the best value found, not a certified maximum.
    """
    if not 1 <= m <= basis.size:
        raise ValueError(f"mode cutoff m={m} outside [1, {basis.size}]")
    model = _RatioModel(basis, ops, T, omega, E, m)
    results = []
    if m == 1:
        results.append((np.ones(1), 0))
    else:
        for s in range(starts):
            beta0 = sample_rng(seed, s).standard_normal(m)
            beta, _, its = _ascend(model, beta0, max_iter)
            results.append((beta, its))
    ratios = []
    vts = []
    for beta, _ in results:
        amps = beta * velocity_modes(basis, m)
        vT = VelocityField.from_flat(ops.grid, ops.C @ basis.synthesize(amps))
        vts.append(vT)
        ratios.append(observability_ratio(basis, ops, vT, T, omega, E))
    ratios = np.array(ratios)
    k = int(np.argmax(ratios))
    beta = results[k][0]
    return ObservabilityEstimate(float(ratios[k]), vts[k], beta, ratios,
                                 int(np.argmax(np.abs(beta))),
                                 np.array([r[1] for r in results]))
