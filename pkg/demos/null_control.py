"""Minimal-norm null control, its bang-bang profile, and minimal time.

Run with ``python demos/null_control.py``.
"""
from __future__ import annotations

import math

from slipstokes import (ControlProblem, Rectangle, bang_bang_deviation, build_grid,
                        build_operators, build_region_mask, build_time_set, eigendecompose,
                        full_region, minimal_norm, minimal_time_bisection)
from slipstokes.sampling import mode_velocity, random_velocity, sample_rng

n, T = 16, 1.0
grid = build_grid(n)
ops = build_operators(grid)
basis = eigendecompose(ops)
omega = build_region_mask(grid, Rectangle(0.0, 0.5, 0.0, 0.5))
E = build_time_set([(0.2, 0.8)], T)

u0 = random_velocity(basis, ops, sample_rng(0))
M, result = minimal_norm(basis, ops, ControlProblem(u0, T, omega, E, 32))
rep = result.report
print(f"control norm M = {M:.4e}")
print(f"terminal ratio {rep.rho:.2e}, uncontrolled {rep.rho_free:.2e}")
print(f"bang-bang deviation {bang_bang_deviation(result):.2e} over {result.norms.size} cells")
print(f"duality residual {rep.duality_max:.2e}, support violations {rep.support_violations}")

lam = basis.eigenvalues[0]
u1 = mode_velocity(basis, ops, 0, 1.0 / math.sqrt(lam))
for budget in (0.25, 0.5, 1.0):
    res = minimal_time_bisection(basis, ops, u1, budget, full_region(grid), 0.01, 1.0)
    exact = math.log1p(lam / budget) / lam
    print(f"budget {budget}: T in [{res.T_lo:.7f}, {res.T_hi:.7f}], scalar value {exact:.7f}")
