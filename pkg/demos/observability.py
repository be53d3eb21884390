"""Unique continuation fit and an observability constant on a corner region.

Run with ``python demos/observability.py``.
"""
from __future__ import annotations

from slipstokes import Rectangle, build_grid, build_operators, build_region_mask, build_time_set
from slipstokes import eigendecompose, estimate_observability_constant
from slipstokes.observability import evaluate_uc_samples, fit_uc_records, uc_sample_batch

n, T = 16, 1.0
grid = build_grid(n)
ops = build_operators(grid)
basis = eigendecompose(ops)
omega = build_region_mask(grid, Rectangle(0.0, 0.5, 0.0, 0.5))

records = evaluate_uc_samples(basis, ops, uc_sample_batch(0, 100, T), omega, 0, 64)
fit = fit_uc_records(records)
print(f"interpolation fit: alpha = {fit.alpha}, N = {fit.N:.4g}")
for alpha in (0.05, 0.25, 0.5, 0.75):
    print(f"  N(alpha={alpha}) = {fit.per_alpha[alpha]:.4g}")

E = build_time_set([(0.2, 0.8)], T)
for m in (1, 8, 32):
    est = estimate_observability_constant(basis, ops, T, omega, E, m, starts=8, seed=0)
    print(f"m={m:2d}: observability lower bound {est.ratio:.4e}, "
          f"dominant mode {est.dominant_mode + 1}, dispersion {est.dispersion:.3f}")
