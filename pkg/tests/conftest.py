from __future__ import annotations

import functools
from typing import NamedTuple

import numpy as np
import pytest

from slipstokes.geometry import Grid, build_grid
from slipstokes.operators import OperatorSet, build_operators
from slipstokes.spectral import EigenBasis, eigendecompose


class Lab(NamedTuple):
    grid: Grid
    ops: OperatorSet
    basis: EigenBasis


@functools.lru_cache(maxsize=None)
def make_lab(n: int) -> Lab:
    grid = build_grid(n)
    ops = build_operators(grid)
    return Lab(grid, ops, eigendecompose(ops))


@pytest.fixture(scope="session")
def lab8() -> Lab:
    return make_lab(8)


@pytest.fixture(scope="session")
def lab16() -> Lab:
    return make_lab(16)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def rel(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
