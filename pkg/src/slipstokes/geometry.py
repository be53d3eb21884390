"""Discrete domain, field containers, observation regions and time sets.

The domain is the unit square with ``n`` interior nodes per axis and spacing
``h = 1/(n+1)``.  Scalars (stream function, vorticity) live on interior nodes
with implicit zero boundary values.  The two velocity components live on
staggered edge sets::

    comp1 (= d psi / dy)  : x at interior nodes,   y at edge midpoints  -> (n, n+1)
    comp2 (= -d psi / dx) : x at edge midpoints,   y at interior nodes  -> (n+1, n)

Arrays are flattened in C order with the x index first.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

MIN_N = 2
MAX_N = 256


class GridSizeError(ValueError):
    pass


class DegenerateRegionError(ValueError):
    pass


class DegenerateTimeSetError(ValueError):
    pass


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    n: int

    @property
    def h(self) -> float:
        return 1.0 / (self.n + 1)

    @property
    def node_count(self) -> int:
        return self.n * self.n

    @property
    def node_shape(self) -> tuple[int, int]:
        return (self.n, self.n)

    @property
    def comp1_shape(self) -> tuple[int, int]:
        return (self.n, self.n + 1)

    @property
    def comp2_shape(self) -> tuple[int, int]:
        return (self.n + 1, self.n)

    @property
    def edge_count(self) -> int:
        return self.n * (self.n + 1)

    def node_axis(self) -> np.ndarray:
        # (i+1)/(n+1) rather than (i+1)*h keeps h*(n+1) == 1 exact at the ends
        return np.arange(1, self.n + 1) / (self.n + 1)

    def edge_axis(self) -> np.ndarray:
        return (np.arange(self.n + 1) + 0.5) / (self.n + 1)

    def node_coords(self) -> tuple[np.ndarray, np.ndarray]:
        x = self.node_axis()
        X, Y = np.meshgrid(x, x, indexing="ij")
        return X.ravel(), Y.ravel()

    def comp1_coords(self) -> tuple[np.ndarray, np.ndarray]:
        X, Y = np.meshgrid(self.node_axis(), self.edge_axis(), indexing="ij")
        return X.ravel(), Y.ravel()

    def comp2_coords(self) -> tuple[np.ndarray, np.ndarray]:
        X, Y = np.meshgrid(self.edge_axis(), self.node_axis(), indexing="ij")
        return X.ravel(), Y.ravel()


def build_grid(n: int) -> Grid:
    if isinstance(n, bool) or int(n) != n:
        raise GridSizeError(f"grid size must be an integer, got {n!r}")
    n = int(n)
    if not MIN_N <= n <= MAX_N:
        raise GridSizeError(f"grid size n={n} outside [{MIN_N}, {MAX_N}]")
    return Grid(n)


@dataclass(frozen=True, eq=False)
class NodeField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if values.size != self.grid.node_count:
            raise GridMismatchError(
                f"node field has {values.size} values, grid expects {self.grid.node_count}")
        if not np.all(np.isfinite(values)):
            raise ValueError("node field contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, grid: Grid) -> "NodeField":
        return cls(grid, np.zeros(grid.node_count))

    def as_array(self) -> np.ndarray:
        return self.values.reshape(self.grid.node_shape)

    def __add__(self, other: "NodeField") -> "NodeField":
        _check_same_grid(self.grid, other.grid)
        return NodeField(self.grid, self.values + other.values)

    def __sub__(self, other: "NodeField") -> "NodeField":
        _check_same_grid(self.grid, other.grid)
        return NodeField(self.grid, self.values - other.values)

    def __mul__(self, c: float) -> "NodeField":
        return NodeField(self.grid, c * self.values)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class VelocityField:
    grid: Grid
    comp1: np.ndarray
    comp2: np.ndarray

    def __post_init__(self):
        c1 = np.asarray(self.comp1, dtype=float).ravel()
        c2 = np.asarray(self.comp2, dtype=float).ravel()
        if c1.size != self.grid.edge_count or c2.size != self.grid.edge_count:
            raise GridMismatchError(
                f"velocity components have sizes {c1.size}, {c2.size}; "
                f"grid expects {self.grid.edge_count} each")
        if not (np.all(np.isfinite(c1)) and np.all(np.isfinite(c2))):
            raise ValueError("velocity field contains non-finite values")
        c1.setflags(write=False)
        c2.setflags(write=False)
        object.__setattr__(self, "comp1", c1)
        object.__setattr__(self, "comp2", c2)

    @classmethod
    def zeros(cls, grid: Grid) -> "VelocityField":
        return cls(grid, np.zeros(grid.edge_count), np.zeros(grid.edge_count))

    @classmethod
    def from_flat(cls, grid: Grid, flat: np.ndarray) -> "VelocityField":
        flat = np.asarray(flat, dtype=float)
        m = grid.edge_count
        return cls(grid, flat[:m], flat[m:])

    def flat(self) -> np.ndarray:
        return np.concatenate([self.comp1, self.comp2])

    def __add__(self, other: "VelocityField") -> "VelocityField":
        _check_same_grid(self.grid, other.grid)
        return VelocityField(self.grid, self.comp1 + other.comp1, self.comp2 + other.comp2)

    def __sub__(self, other: "VelocityField") -> "VelocityField":
        _check_same_grid(self.grid, other.grid)
        return VelocityField(self.grid, self.comp1 - other.comp1, self.comp2 - other.comp2)

    def __mul__(self, c: float) -> "VelocityField":
        return VelocityField(self.grid, c * self.comp1, c * self.comp2)

    __rmul__ = __mul__


def _check_same_grid(a: Grid, b: Grid) -> None:
    if a != b:
        raise GridMismatchError(f"grid mismatch: n={a.n} vs n={b.n}")


# -- observation regions ----------------------------------------------------

@dataclass(frozen=True)
class Rectangle:
    """Closed axis-aligned box ``[x0, x1] x [y0, y1]``."""
    x0: float
    x1: float
    y0: float
    y1: float

    def contains(self, x, y):
        return (x >= self.x0) & (x <= self.x1) & (y >= self.y0) & (y <= self.y1)

    def to_dict(self) -> dict:
        return {"kind": "rectangle", "bounds": [[self.x0, self.x1], [self.y0, self.y1]]}


@dataclass(frozen=True)
class Disk:
    cx: float
    cy: float
    radius: float

    def contains(self, x, y):
        return (x - self.cx) ** 2 + (y - self.cy) ** 2 <= self.radius ** 2

    def to_dict(self) -> dict:
        return {"kind": "disk", "center": [self.cx, self.cy], "radius": self.radius}


def shape_from_dict(data: dict) -> Rectangle | Disk:
    kind = data.get("kind")
    if kind == "rectangle":
        (x0, x1), (y0, y1) = data["bounds"]
        if not (x0 < x1 and y0 < y1):
            raise DegenerateRegionError(f"rectangle has empty interior: {data['bounds']}")
        return Rectangle(float(x0), float(x1), float(y0), float(y1))
    if kind == "disk":
        cx, cy = data["center"]
        r = float(data["radius"])
        if r <= 0:
            raise DegenerateRegionError(f"disk radius must be positive, got {r}")
        return Disk(float(cx), float(cy), r)
    raise ValueError(f"unknown region kind {kind!r}")


FULL_SQUARE = Rectangle(0.0, 1.0, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class RegionMask:
    grid: Grid
    node_mask: np.ndarray
    comp1_mask: np.ndarray
    comp2_mask: np.ndarray
    shape: Rectangle | Disk

    @property
    def edge_mask(self) -> np.ndarray:
        return np.concatenate([self.comp1_mask, self.comp2_mask])

    def complement(self) -> "RegionMask":
        """Complementary dof sets; may be empty, so no degeneracy check."""
        return RegionMask(self.grid, ~self.node_mask, ~self.comp1_mask,
                          ~self.comp2_mask, self.shape)

    def restrict(self, u: VelocityField) -> VelocityField:
        _check_same_grid(self.grid, u.grid)
        return VelocityField(self.grid, np.where(self.comp1_mask, u.comp1, 0.0),
                             np.where(self.comp2_mask, u.comp2, 0.0))


def build_region_mask(grid: Grid, shape: Rectangle | Disk | dict) -> RegionMask:
    if isinstance(shape, dict):
        shape = shape_from_dict(shape)
    node_mask = shape.contains(*grid.node_coords())
    comp1_mask = shape.contains(*grid.comp1_coords())
    comp2_mask = shape.contains(*grid.comp2_coords())
    if not node_mask.any() or not (comp1_mask.any() or comp2_mask.any()):
        raise DegenerateRegionError(
            f"region {shape} contains no grid dofs at n={grid.n}; refine the grid")
    for m in (node_mask, comp1_mask, comp2_mask):
        m.setflags(write=False)
    return RegionMask(grid, node_mask, comp1_mask, comp2_mask, shape)


def full_region(grid: Grid) -> RegionMask:
    return build_region_mask(grid, FULL_SQUARE)


# -- time sets --------------------------------------------------------------

@dataclass(frozen=True)
class TimeSet:
    intervals: tuple[tuple[float, float], ...]
    T: float

    @property
    def measure(self) -> float:
        return float(sum(b - a for a, b in self.intervals))

    @property
    def end(self) -> float:
        return self.intervals[-1][1]

    def contains(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape, dtype=bool)
        for a, b in self.intervals:
            out |= (t >= a) & (t <= b)
        return out

    def to_list(self) -> list[list[float]]:
        return [[a, b] for a, b in self.intervals]


def build_time_set(intervals: Sequence[Sequence[float]], T: float) -> TimeSet:
    """Merge ``intervals`` into a sorted disjoint union inside ``[0, T]``.

    Overlapping or touching pieces are merged.  Zero-length pieces are
    dropped; if nothing of positive length remains the set is degenerate.
    """
    T = float(T)
    if not T > 0:
        raise DegenerateTimeSetError(f"horizon must be positive, got {T}")
    pieces = []
    for pair in intervals:
        a, b = (float(v) for v in pair)
        if a < 0 or b > T or a > b:
            raise ValueError(f"interval ({a}, {b}) is not contained in [0, {T}]")
        if b > a:
            pieces.append((a, b))
    pieces.sort()
    merged: list[tuple[float, float]] = []
    for a, b in pieces:
        if merged and a <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], b))
        else:
            merged.append((a, b))
    if not merged:
        raise DegenerateTimeSetError("time set has zero measure")
    return TimeSet(tuple(merged), T)


# -- norms ------------------------------------------------------------------

def masked_l2_norm(f: NodeField | VelocityField, mask: RegionMask | None = None) -> float:
    """Discrete L2 norm ``sqrt(h^2 * sum of squares)`` over the masked dofs."""
    if mask is not None:
        _check_same_grid(f.grid, mask.grid)
    h2 = f.grid.h ** 2
    if isinstance(f, NodeField):
        v = f.values if mask is None else f.values[mask.node_mask]
        return float(np.sqrt(h2 * np.dot(v, v)))
    if mask is None:
        a, b = f.comp1, f.comp2
    else:
        a, b = f.comp1[mask.comp1_mask], f.comp2[mask.comp2_mask]
    return float(np.sqrt(h2 * (np.dot(a, a) + np.dot(b, b))))


def inner(f: NodeField | VelocityField, g: NodeField | VelocityField) -> float:
    """h^2-weighted inner product of two fields of the same kind."""
    _check_same_grid(f.grid, g.grid)
    h2 = f.grid.h ** 2
    if isinstance(f, NodeField) and isinstance(g, NodeField):
        return float(h2 * np.dot(f.values, g.values))
    if isinstance(f, VelocityField) and isinstance(g, VelocityField):
        return float(h2 * (np.dot(f.comp1, g.comp1) + np.dot(f.comp2, g.comp2)))
    raise TypeError("inner product needs two node fields or two velocity fields")
