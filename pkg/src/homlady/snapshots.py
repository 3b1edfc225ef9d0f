"""Binary field snapshots and CSV export.

Layout: a 32-byte header (magic "LADYGRID", nx, ny, field count, bc flag,
time) followed by the u, v, q arrays as row-major float64.
"""

from __future__ import annotations

import struct

import numpy as np

from .grid_core import NOSLIP, PERIODIC, FlowState, MacGrid

MAGIC = b"LADYGRID"
_HEADER = struct.Struct("<8sIIIB3xd")  # 8 + 4 + 4 + 4 + 1 + 3 + 8 = 32 bytes


def write_snapshot(path, state, grid):
    bc_flag = 0 if grid.bc == PERIODIC else 1
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, grid.nx, grid.ny, 3, bc_flag, state.time))
        for arr in (state.u, state.v, state.q):
            fh.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())


def read_snapshot(path):
    with open(path, "rb") as fh:
        magic, nx, ny, nfields, bc_flag, time = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a LADYGRID snapshot")
        if nfields != 3:
            raise ValueError(f"{path}: unexpected field count {nfields}")
        grid = MacGrid(int(nx), int(ny), PERIODIC if bc_flag == 0 else NOSLIP)
        arrays = []
        for shape in (grid.shape_u, grid.shape_v, grid.shape_q):
            n = int(np.prod(shape))
            arrays.append(
                np.frombuffer(fh.read(8 * n), dtype=np.float64).reshape(shape).copy()
            )
    return FlowState(*arrays, time=float(time)), grid


def write_diagnostics_csv(path, diagnostics, columns=("t", "E", "E_rho", "H1",
                                                      "Wp", "q_norm")):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for row in np.atleast_2d(diagnostics):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def export_field_csv(path, field):
    """Cell field as x-index, y-index, value rows."""
    field = np.asarray(field)
    with open(path, "w", newline="") as fh:
        fh.write("i,j,value\n")
        for i in range(field.shape[0]):
            for j in range(field.shape[1]):
                fh.write(f"{i},{j},{field[i, j]!r}\n")
