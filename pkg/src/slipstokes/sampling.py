"""Seeded random fields.

Every sample draws from its own stream keyed by ``(seed, index)`` through
``SeedSequence`` spawn keys, so batches give identical results whether they
run serially, in parallel or in a different order.
"""
from __future__ import annotations

import numpy as np

from .geometry import NodeField, VelocityField
from .operators import OperatorSet
from .spectral import EigenBasis

DEFAULT_MODES = 64


def sample_rng(seed: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),)))


def default_modes(basis: EigenBasis) -> int:
    return min(DEFAULT_MODES, basis.size)


def random_stream(basis: EigenBasis, rng: np.random.Generator, m: int | None = None) -> NodeField:
    """Stream function with i.i.d. standard normal amplitudes on the first ``m`` modes."""
    m = default_modes(basis) if m is None else m
    return NodeField(basis.grid, basis.synthesize(rng.standard_normal(m)))


def velocity_modes(basis: EigenBasis, m: int) -> np.ndarray:
    """Stream amplitudes whose curls are unit-norm velocity modes; shape (m,)."""
    return 1.0 / np.sqrt(basis.eigenvalues[:m])


def random_velocity(basis: EigenBasis, ops: OperatorSet, rng: np.random.Generator,
                    m: int | None = None) -> VelocityField:
    """Divergence-free velocity ``sum_i c_i curl(e_i)/sqrt(lambda_i)`` with c_i ~ N(0, 1)."""
    m = default_modes(basis) if m is None else m
    amps = rng.standard_normal(m) * velocity_modes(basis, m)
    return VelocityField.from_flat(basis.grid, ops.C @ basis.synthesize(amps))


def mode_velocity(basis: EigenBasis, ops: OperatorSet, i: int, scale: float = 1.0) -> VelocityField:
    """``scale * curl(e_i)`` for the 0-based mode index ``i``."""
    return VelocityField.from_flat(basis.grid, scale * (ops.C @ basis.mode(i).values))
