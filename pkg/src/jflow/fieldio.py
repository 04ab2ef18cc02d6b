"""Binary field dumps.

Layout: magic ``b"JFLB"``, version (u32), mode (u8: 0 reduced, 1 full),
ndims (u8), one u32 per dimension, then the node values as little-endian
float64 in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .geometry import Grid, Mode, ScalarField

MAGIC = b"JFLB"
VERSION = 1
_MODE_CODES = {Mode.REDUCED: 0, Mode.FULL: 1}


class FieldFormatError(ValueError):
    pass


def dumps(field: ScalarField) -> bytes:
    grid = field.grid
    header = MAGIC + struct.pack("<IBB", VERSION, _MODE_CODES[grid.mode], grid.ndim)
    header += struct.pack(f"<{grid.ndim}I", *grid.shape)
    return header + np.ascontiguousarray(field.values, dtype="<f8").tobytes(order="C")


def loads(data: bytes) -> ScalarField:
    if data[:4] != MAGIC:
        raise FieldFormatError("bad magic, not a JFLB field dump")
    if len(data) < 10:
        raise FieldFormatError("truncated header")
    version, mode_code, ndims = struct.unpack_from("<IBB", data, 4)
    if version != VERSION:
        raise FieldFormatError(f"unsupported version {version}")
    try:
        mode = {v: k for k, v in _MODE_CODES.items()}[mode_code]
    except KeyError:
        raise FieldFormatError(f"unknown mode code {mode_code}") from None
    offset = 10 + 4 * ndims
    if len(data) < offset:
        raise FieldFormatError("truncated header")
    dims = struct.unpack_from(f"<{ndims}I", data, 10)
    if len(set(dims)) != 1:
        raise FieldFormatError(f"non-uniform dims {dims}")
    grid = Grid(mode, dims[0])
    if grid.ndim != ndims:
        raise FieldFormatError(f"{mode.value} grids have {grid.ndim} dims, header says {ndims}")
    count = int(np.prod(dims))
    if len(data) != offset + 8 * count:
        raise FieldFormatError(f"expected {count} float64 values, got {(len(data) - offset) / 8}")
    values = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(dims)
    return ScalarField(grid, values.astype(float))


def write_field(path, field: ScalarField) -> None:
    Path(path).write_bytes(dumps(field))


def read_field(path) -> ScalarField:
    return loads(Path(path).read_bytes())
