from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from slipstokes.geometry import (NodeField, Rectangle, VelocityField, build_region_mask,
                                 build_time_set, full_region, masked_l2_norm)
from slipstokes.observability import (ALPHA_GRID, ChainCheck, EnergySeries,
                                      ObservabilityDegenerateError, UCFitError, UCRecord,
                                      ZeroEnergyError, adaptive_simpson, chain_satisfied,
                                      energy_series, estimate_observability_constant,
                                      evaluate_uc_samples, fit_uc_constants, fit_uc_records,
                                      graded_gauss_rule, gradient_energy_monotonicity,
                                      interpolation_chain_check, log_convexity_margin,
                                      observability_ratio, three_ball_quotient,
                                      uc_sample_batch, uc_sample_times)
from slipstokes.sampling import mode_velocity, random_stream, random_velocity, sample_rng

from conftest import make_lab


@pytest.fixture(scope="module")
def quarter(lab16):
    return build_region_mask(lab16.grid, Rectangle(0, 0.5, 0, 0.5))


def test_energy_series_modes(lab16):
    b = lab16.basis
    lam1, lam2 = b.eigenvalues[:2]
    t = np.linspace(0, 0.5, 11)
    s = energy_series(b, lab16.ops, b.mode(0), t)
    d = np.exp(-2 * lam1 * t)
    assert np.allclose(s.e, lam1 * d, rtol=1e-12)
    assert np.allclose(s.de, -2 * lam1 ** 2 * d, rtol=1e-12)
    assert np.allclose(s.dde, 4 * lam1 ** 3 * d, rtol=1e-12)
    s2 = energy_series(b, lab16.ops, b.mode(0) + b.mode(1), t)
    d2 = np.exp(-2 * lam2 * t)
    assert np.allclose(s2.e, lam1 * d + lam2 * d2, rtol=1e-12)
    assert np.allclose(s2.de, -2 * (lam1 ** 2 * d + lam2 ** 2 * d2), rtol=1e-12)
    assert np.allclose(s2.dde, 4 * (lam1 ** 3 * d + lam2 ** 3 * d2), rtol=1e-12)


def test_energy_series_matches_quadratic_forms(lab16, rng):
    ops = lab16.ops
    psi0 = random_stream(lab16.basis, rng)
    s = energy_series(lab16.basis, ops, psi0, [0.0])
    h2 = lab16.grid.h ** 2
    w = ops.L @ psi0.values
    assert math.isclose(s.e[0], h2 * psi0.values @ w, rel_tol=1e-12)
    assert math.isclose(s.de[0], -2 * h2 * w @ w, rel_tol=1e-12)
    assert math.isclose(s.dde[0], 4 * h2 * w @ (ops.L @ w), rel_tol=1e-11)


def test_log_convexity_margins(lab16):
    b, ops = lab16.basis, lab16.ops
    t = np.linspace(0, 1, 33)
    assert abs(log_convexity_margin(energy_series(b, ops, b.mode(0), t))) <= 1e-14
    # strict inequality while both modes carry energy; mode 1 dominates later
    two = energy_series(b, ops, b.mode(0) + b.mode(4) * 10.0, np.linspace(0, 0.1, 33))
    assert log_convexity_margin(two) > 1e-4
    with pytest.raises(ZeroEnergyError):
        log_convexity_margin(energy_series(b, ops, NodeField.zeros(lab16.grid), t))


@given(st.integers(0, 10**6))
@settings(max_examples=30, deadline=None)
def test_log_convexity_random(seed):
    lab = make_lab(16)
    psi0 = random_stream(lab.basis, sample_rng(seed))
    s = energy_series(lab.basis, lab.ops, psi0, np.linspace(0, 1, 33))
    assert log_convexity_margin(s) >= -1e-12
    assert np.all(s.de <= 0) and np.all(s.dde >= 0)
    assert gradient_energy_monotonicity(s)


def test_monotonicity_negative_control(lab16):
    t = np.linspace(0, 1, 5)
    fake = EnergySeries(t, np.linspace(1, 2, 5), np.zeros(5), np.zeros(5))
    assert not gradient_energy_monotonicity(fake)
    zero = energy_series(lab16.basis, lab16.ops, NodeField.zeros(lab16.grid), t)
    assert gradient_energy_monotonicity(zero) and not np.any(zero.e)


def test_chain_single_mode_scalars(lab16):
    b = lab16.basis
    lam = b.eigenvalues[0]
    rep = interpolation_chain_check(b, lab16.ops, b.mode(0), 0.0, 0.2)
    assert math.isclose(rep["a"].lhs, lam ** 1.5 * math.exp(-lam * 0.1), rel_tol=1e-12)
    assert math.isclose(rep["a"].rhs, lam ** 0.5 / 0.1, rel_tol=1e-12)
    assert chain_satisfied(rep)


def test_chain_zero_state(lab16):
    rep = interpolation_chain_check(lab16.basis, lab16.ops, NodeField.zeros(lab16.grid), 0.1, 0.3)
    assert chain_satisfied(rep)


def test_chain_rejects_bad_times(lab16):
    with pytest.raises(ValueError):
        interpolation_chain_check(lab16.basis, lab16.ops, lab16.basis.mode(0), 0.3, 0.3)


@given(st.integers(0, 10**6), st.floats(0.0, 0.5), st.floats(0.01, 0.5))
@settings(max_examples=40, deadline=None)
def test_chain_random(seed, t1, gap):
    lab = make_lab(16)
    psi0 = random_stream(lab.basis, sample_rng(seed))
    rep = interpolation_chain_check(lab.basis, lab.ops, psi0, t1, t1 + gap)
    assert chain_satisfied(rep)
    assert all(isinstance(rep[k], ChainCheck) for k in "abc")


def test_three_ball_examples(lab16, quarter, rng):
    b, ops = lab16.basis, lab16.ops
    full = full_region(lab16.grid)
    u0 = random_velocity(b, ops, rng)
    for alpha in (0.1, 0.5, 0.9):
        assert three_ball_quotient(b, ops, u0, 0.1, 0.4, full, alpha) <= 1 + 1e-12
    u0 = mode_velocity(b, ops, 0, 1.0)
    lam = b.eigenvalues[0]
    n0, r = masked_l2_norm(u0), masked_l2_norm(u0, quarter)
    t1, t2, alpha = 0.05, 0.3, 0.4
    q = three_ball_quotient(b, ops, u0, t1, t2, quarter, alpha)
    ref = math.exp(-lam * t2) * n0 / ((math.exp(-lam * t2) * r) ** alpha
                                      * (math.exp(-lam * t1) * n0) ** (1 - alpha))
    assert math.isclose(q, ref, rel_tol=1e-10)
    with pytest.raises(ObservabilityDegenerateError):
        three_ball_quotient(b, ops, VelocityField.zeros(lab16.grid), t1, t2, quarter, alpha)


def test_three_ball_high_modes_away_from_region(lab16, quarter):
    b, ops = lab16.basis, lab16.ops
    far = build_region_mask(lab16.grid, Rectangle(0.6, 1.0, 0.6, 1.0))
    # a field concentrated away from omega: project a bump in the far corner
    x, y = lab16.grid.node_coords()
    bump = NodeField(lab16.grid, np.exp(-80 * ((x - 0.8) ** 2 + (y - 0.8) ** 2)))
    u0 = VelocityField.from_flat(lab16.grid, ops.C @ bump.values)
    q = three_ball_quotient(b, ops, u0, 0.0, 0.002, quarter, 0.5)
    assert math.isfinite(q) and q > three_ball_quotient(b, ops, u0, 0.0, 0.002, far, 0.5)


@given(st.integers(0, 10**6), st.floats(0.2, 0.45), st.floats(0.05, 0.5))
@settings(max_examples=20, deadline=None)
def test_quotient_monotone_in_region(seed, a, grow):
    lab = make_lab(16)
    u0 = random_velocity(lab.basis, lab.ops, sample_rng(seed))
    small = build_region_mask(lab.grid, Rectangle(0, a, 0, a))
    big = build_region_mask(lab.grid, Rectangle(0, a + grow, 0, a + grow))
    q_small = three_ball_quotient(lab.basis, lab.ops, u0, 0.1, 0.3, small, 0.5)
    q_big = three_ball_quotient(lab.basis, lab.ops, u0, 0.1, 0.3, big, 0.5)
    assert q_big <= q_small * (1 + 1e-12)


def test_uc_sampler_is_counter_based():
    batch = uc_sample_batch(3, 20, 1.0)
    tail = uc_sample_batch(3, 10, 1.0, start=10)
    assert batch[10:] == tail
    for _, t1, t2 in batch:
        assert 0 <= t1 <= 0.5 and t1 + 0.02 <= t2 <= 1.0
    assert uc_sample_times(3, 4, 1.0) == batch[4][1:]


def test_uc_fit_full_region_bounded(lab16):
    full = full_region(lab16.grid)
    fit = fit_uc_constants(lab16.basis, lab16.ops, uc_sample_batch(0, 20, 1.0), full)
    assert 0 < fit.alpha < 1 and fit.N <= math.e
    assert not fit.violations(fit.records)


def test_uc_fit_single_record_matches_root_finder():
    rec = UCRecord(0, 0.1, 0.35, 2.0, 1.5, 0.01)
    fit = fit_uc_records([rec], alphas=(0.5,), min_samples=1)
    target = rec.log_target(0.5)
    gap = rec.t2 - rec.t1
    x = brentq(lambda x: x + math.exp(x) / gap - target, -50, 50, xtol=1e-14)
    assert math.isclose(fit.N, math.exp(x), rel_tol=1e-6)
    assert fit.satisfies(rec)


def test_uc_fit_invariant_and_errors(lab16, quarter):
    recs = evaluate_uc_samples(lab16.basis, lab16.ops, uc_sample_batch(1, 30, 1.0), quarter, 1)
    fit = fit_uc_records(recs)
    assert fit.alpha in ALPHA_GRID
    assert not fit.violations(recs)
    assert fit.N == min(fit.per_alpha.values())
    with pytest.raises(UCFitError):
        fit_uc_records(recs[:5])
    dead = [UCRecord(i, 0.1, 0.2, 1.0, 1.0, 0.0) for i in range(12)]
    with pytest.raises(UCFitError):
        with pytest.warns(UserWarning):
            fit_uc_records(dead)


def test_uc_fit_excludes_degenerate_samples(lab16, quarter):
    recs = evaluate_uc_samples(lab16.basis, lab16.ops, uc_sample_batch(2, 12, 1.0), quarter, 2)
    recs.append(UCRecord(999, 0.1, 0.2, 1.0, 1.0, 0.0))
    with pytest.warns(UserWarning, match="excluded 1"):
        fit = fit_uc_records(recs)
    assert fit.excluded == (999,)


def test_adaptive_simpson():
    assert math.isclose(adaptive_simpson(math.exp, 0, 1, 1e-12), math.e - 1, rel_tol=1e-12)
    val = adaptive_simpson(lambda t: math.exp(300 * t), 0, 0.1, 1e-9 * math.exp(30) / 300)
    assert math.isclose(val, math.expm1(30) / 300, rel_tol=1e-9)


def test_graded_rule_integrates_fast_exponentials():
    E = build_time_set([(0.2, 0.8)], 1.0)
    t, w = graded_gauss_rule(E, 2000.0)
    for rate in (1.0, 50.0, 2000.0):
        exact = (math.exp(-rate * 0.2) - math.exp(-rate * 0.8)) / rate
        approx = w @ np.exp(-rate * (1.0 - t))
        assert math.isclose(approx, exact, rel_tol=1e-12)


def test_ratio_single_mode_closed_form(lab16, quarter):
    b, ops = lab16.basis, lab16.ops
    lam = b.eigenvalues[0]
    vT = mode_velocity(b, ops, 0)
    T = 0.5
    for omega in (quarter, full_region(lab16.grid)):
        r = masked_l2_norm(vT, omega)
        ratio = observability_ratio(b, ops, vT, T, omega, build_time_set([(0, T)], T))
        ref = math.exp(-lam * T) * masked_l2_norm(vT) / (r * -math.expm1(-lam * T) / lam)
        assert math.isclose(ratio, ref, rel_tol=1e-8)
    with pytest.raises(ObservabilityDegenerateError):
        observability_ratio(b, ops, VelocityField.zeros(lab16.grid), T, quarter,
                            build_time_set([(0, T)], T))


def test_ratio_monotone_in_time_set(lab16, quarter, rng):
    b, ops = lab16.basis, lab16.ops
    vT = random_velocity(b, ops, rng, 16)
    ratios = [observability_ratio(b, ops, vT, 1.0, quarter, build_time_set([(a, 0.9)], 1.0))
              for a in (0.1, 0.4, 0.7, 0.85)]
    assert all(x < y for x, y in zip(ratios, ratios[1:]))
    assert 0 < ratios[0] < math.inf


def test_estimator_single_mode(lab16, quarter):
    T = 1.0
    E = build_time_set([(0.2, 0.8)], T)
    est = estimate_observability_constant(lab16.basis, lab16.ops, T, quarter, E, 1)
    direct = observability_ratio(lab16.basis, lab16.ops, mode_velocity(lab16.basis, lab16.ops, 0),
                                 T, quarter, E)
    assert math.isclose(est.ratio, direct, rel_tol=1e-12)


def test_estimator_full_region_prefers_lowest_mode(lab16):
    # |v(t)| >= exp(lam_1 t) |v(0)| caps the ratio at the lowest mode's value
    b, ops = lab16.basis, lab16.ops
    T = 0.3
    E = build_time_set([(0, T)], T)
    full = full_region(lab16.grid)
    est = estimate_observability_constant(b, ops, T, full, E, 6, starts=4, max_iter=200)
    lam = b.eigenvalues[0]
    bound = lam / math.expm1(lam * T)
    assert est.dominant_mode == 0
    assert math.isclose(est.ratio, bound, rel_tol=1e-6)
    singles = [b.eigenvalues[i] / math.expm1(b.eigenvalues[i] * T) for i in range(6)]
    assert est.ratio >= max(singles) * (1 - 1e-8)


def test_estimator_reports(lab16, quarter):
    E = build_time_set([(0.2, 0.8)], 1.0)
    est = estimate_observability_constant(lab16.basis, lab16.ops, 1.0, quarter, E, 8, starts=3,
                                          max_iter=50, seed=5)
    d = est.to_dict()
    assert len(d["start_ratios"]) == 3 and d["dispersion"] >= 1.0
    assert math.isclose(est.ratio, max(d["start_ratios"]))
    with pytest.raises(ValueError):
        estimate_observability_constant(lab16.basis, lab16.ops, 1.0, quarter, E, 0)
