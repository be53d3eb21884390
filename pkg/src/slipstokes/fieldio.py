"""CSV and raw binary serialization of node and velocity fields.

Binary layout (little endian)::

    bytes 0-3    magic  b"SSL1"
    bytes 4-7    n      uint32
    bytes 8-11   kind   uint32   (0 = node field, 1 = velocity field)
    bytes 12-15  count  uint32   number of float64 values that follow
    bytes 16-    values float64

Velocity values are comp1 followed by comp2.
"""
from __future__ import annotations

import csv
import io
import struct
from pathlib import Path

import numpy as np

from .geometry import Grid, NodeField, VelocityField, build_grid

MAGIC = b"SSL1"
HEADER = struct.Struct("<4sIII")
KIND_NODE = 0
KIND_VELOCITY = 1


class FieldFormatError(ValueError):
    pass


def to_bytes(f: NodeField | VelocityField) -> bytes:
    if isinstance(f, NodeField):
        kind, values = KIND_NODE, f.values
    else:
        kind, values = KIND_VELOCITY, f.flat()
    data = np.ascontiguousarray(values, dtype="<f8").tobytes()
    return HEADER.pack(MAGIC, f.grid.n, kind, values.size) + data


def from_bytes(buf: bytes) -> NodeField | VelocityField:
    if len(buf) < HEADER.size:
        raise FieldFormatError("buffer shorter than header")
    magic, n, kind, count = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FieldFormatError(f"bad magic {magic!r}")
    if len(buf) != HEADER.size + 8 * count:
        raise FieldFormatError("payload length does not match header count")
    grid = build_grid(n)
    values = np.frombuffer(buf, dtype="<f8", offset=HEADER.size).astype(float)
    if kind == KIND_NODE:
        return NodeField(grid, values)
    if kind == KIND_VELOCITY:
        return VelocityField.from_flat(grid, values)
    raise FieldFormatError(f"unknown kind tag {kind}")


def write_binary(path, f: NodeField | VelocityField) -> None:
    Path(path).write_bytes(to_bytes(f))


def read_binary(path) -> NodeField | VelocityField:
    return from_bytes(Path(path).read_bytes())


def _rows(f: NodeField | VelocityField):
    g = f.grid
    if isinstance(f, NodeField):
        x, y = g.node_coords()
        values = f.values
    else:
        x1, y1 = g.comp1_coords()
        x2, y2 = g.comp2_coords()
        x, y = np.concatenate([x1, x2]), np.concatenate([y1, y2])
        values = f.flat()
    for k in range(values.size):
        yield k, repr(float(x[k])), repr(float(y[k])), repr(float(values[k]))


def to_csv(f: NodeField | VelocityField) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "x", "y", "value"])
    w.writerows(_rows(f))
    return buf.getvalue()


def from_csv(text: str, grid: Grid, kind: str = "node") -> NodeField | VelocityField:
    reader = csv.DictReader(io.StringIO(text))
    values = np.array([float(row["value"]) for row in reader])
    if kind == "node":
        return NodeField(grid, values)
    if kind == "velocity":
        return VelocityField.from_flat(grid, values)
    raise ValueError(f"unknown field kind {kind!r}")


def write_csv(path, f: NodeField | VelocityField) -> None:
    Path(path).write_text(to_csv(f))
