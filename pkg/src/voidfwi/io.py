"""Binary file formats for fields and traces, plus guarded writes.

Field file ("WFI1"): 16-byte header = magic, u32 nx, u32 ny, u32 dtype (0 =
float64), then nx*ny little-endian float64 values, row-major in (j, i). The
header carries no physical extents; readers supply them.

Trace file ("WFT1"): magic, u32 n_sensors, u32 nt, float64 dt, then
n_sensors*nt little-endian float64 values, sensor-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .grid import GridSpec, ScalarField
from .solver import SensorTraces

__all__ = [
    "write_field",
    "read_field_raw",
    "read_field",
    "write_traces",
    "read_traces",
    "guarded_write_bytes",
    "OverwriteError",
]

_FIELD_MAGIC = b"WFI1"
_TRACE_MAGIC = b"WFT1"


class OverwriteError(RuntimeError):
    """An existing output file holds different bytes and --force was not given."""


def field_to_bytes(f: ScalarField) -> bytes:
    header = struct.pack("<4sIII", _FIELD_MAGIC, f.grid.nx, f.grid.ny, 0)
    return header + f.values.astype("<f8").tobytes()


def write_field(path, f: ScalarField, force: bool = False):
    guarded_write_bytes(path, field_to_bytes(f), force=force)


def read_field_raw(path) -> tuple[int, int, np.ndarray]:
    """Returns (nx, ny, values) without physical extents."""
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != _FIELD_MAGIC:
        raise ValueError(f"{path}: not a WFI1 field file")
    nx, ny, dtype = struct.unpack("<III", blob[4:16])
    if dtype != 0:
        raise ValueError(f"{path}: unsupported field dtype id {dtype}")
    values = np.frombuffer(blob[16:], dtype="<f8")
    if values.size != nx * ny:
        raise ValueError(f"{path}: expected {nx * ny} values, found {values.size}")
    return nx, ny, values.copy()


def read_field(path, lx: float, ly: float) -> ScalarField:
    nx, ny, values = read_field_raw(path)
    return ScalarField(GridSpec(nx, ny, lx, ly), values)


def traces_to_bytes(t: SensorTraces) -> bytes:
    header = struct.pack("<4sIId", _TRACE_MAGIC, t.n_sensors, t.nt, t.dt)
    return header + t.data.astype("<f8").tobytes()


def write_traces(path, t: SensorTraces, force: bool = False):
    guarded_write_bytes(path, traces_to_bytes(t), force=force)


def read_traces(path) -> SensorTraces:
    blob = Path(path).read_bytes()
    if len(blob) < 20 or blob[:4] != _TRACE_MAGIC:
        raise ValueError(f"{path}: not a WFT1 trace file")
    n_sensors, nt, dt = struct.unpack("<IId", blob[4:20])
    data = np.frombuffer(blob[20:], dtype="<f8")
    if data.size != n_sensors * nt:
        raise ValueError(f"{path}: expected {n_sensors * nt} samples, found {data.size}")
    return SensorTraces(data.reshape(n_sensors, nt).copy(), dt)


def guarded_write_bytes(path, data: bytes, force: bool = False):
    """Write bytes; refuse to replace an existing file with different content
    unless forced. Identical content is left untouched."""
    path = Path(path)
    if path.exists():
        if path.read_bytes() == data:
            return
        if not force:
            raise OverwriteError(
                f"{path} exists with different content; pass force/--force to replace"
            )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
