"""Discrete two-dimensional Stokes flow with the Navier slip condition.

The velocity is reduced to a stream function on the unit square; curl and
rot are a staggered transpose pair, the Stokes semigroup is diagonalized by
the five-point Dirichlet eigenbasis, and on top of that sit the unique
continuation and observability diagnostics and a duality-based null
control synthesizer.
"""
from __future__ import annotations

from .config import ConfigError, RunConfig, parse_config
from .control import (ControlProblem, ControlResult, bang_bang_deviation, build_bangbang_control,
                      dual_functional, minimal_norm, minimal_time_bisection, minimize_dual,
                      verify_null_control)
from .geometry import (Disk, NodeField, Rectangle, RegionMask, TimeSet, VelocityField, build_grid,
                       build_region_mask, build_time_set, full_region, masked_l2_norm)
from .observability import (energy_series, estimate_observability_constant, fit_uc_constants,
                            interpolation_chain_check, log_convexity_margin, observability_ratio,
                            three_ball_quotient)
from .operators import build_operators, green_formula_residual, stream_from_velocity
from .runner import list_experiments, run_experiment
from .spectral import (eigendecompose, solve_adjoint, solve_stokes_forced, solve_stokes_free,
                       solve_stokes_free_cn)

__version__ = "0.1.0"

__all__ = [
    "bang_bang_deviation", "build_bangbang_control", "build_grid", "build_operators",
    "build_region_mask", "build_time_set", "ConfigError", "ControlProblem", "ControlResult",
    "Disk", "dual_functional", "eigendecompose", "energy_series",
    "estimate_observability_constant", "fit_uc_constants", "full_region",
    "green_formula_residual", "interpolation_chain_check", "list_experiments",
    "log_convexity_margin", "masked_l2_norm", "minimal_norm", "minimal_time_bisection",
    "minimize_dual", "NodeField", "observability_ratio", "parse_config", "Rectangle",
    "RegionMask", "run_experiment", "RunConfig", "solve_adjoint", "solve_stokes_forced",
    "solve_stokes_free", "solve_stokes_free_cn", "stream_from_velocity", "three_ball_quotient",
    "TimeSet", "VelocityField", "verify_null_control",
]
