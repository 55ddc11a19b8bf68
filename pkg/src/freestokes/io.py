"""CSV ledger output and legacy-VTK dumps."""

from __future__ import annotations

import os

import numpy as np

from freestokes import diagnostics
from freestokes.mesh import VolumeMesh
from freestokes.stokes import StokesSolution

CSV_COLUMNS = ("step", "t", "h_l2_sq", "strain_energy", "E_L", "E_R", "E_bar",
               "volume", "volume_drift", "picard_iters", "outer_iters")


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_ledger_csv(ledger, path: str) -> None:
    """One row per step with the exact column set; header-only when empty."""
    records = ledger.records if hasattr(ledger, "records") else list(ledger)
    ebar = diagnostics.normalized_energy(ledger) if records else []
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(",".join(CSV_COLUMNS) + "\n")
            for rec, eb in zip(records, ebar):
                row = (rec.step, rec.t, rec.h_l2_sq, rec.strain_energy,
                       rec.E_L, rec.E_R, eb, rec.volume, rec.volume_drift,
                       rec.picard_iters, rec.outer_iters)
                fh.write(",".join(_fmt(v) for v in row) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write ledger CSV {path!r}: {exc}") from exc


def write_vtk(mesh: VolumeMesh, sol: StokesSolution, path: str) -> None:
    """Legacy ASCII VTK (version 3.0) with point data u (vector), pi (scalar).

    Point data is written at mesh vertices (the quadratic velocity restricted
    to them).
    """
    nv = mesh.n_vertices
    nt = mesh.n_triangles
    ux = sol.u[0:2 * nv:2]
    uz = sol.u[1:2 * nv:2]
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("# vtk DataFile Version 3.0\n")
            fh.write("freestokes snapshot\n")
            fh.write("ASCII\n")
            fh.write("DATASET UNSTRUCTURED_GRID\n")
            fh.write(f"POINTS {nv} double\n")
            for (x, z) in mesh.vertices:
                fh.write(f"{float(x)!r} {float(z)!r} 0.0\n")
            fh.write(f"CELLS {nt} {4 * nt}\n")
            for tri in mesh.triangles:
                fh.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n")
            fh.write(f"CELL_TYPES {nt}\n")
            fh.write("\n".join(["5"] * nt) + "\n")
            fh.write(f"POINT_DATA {nv}\n")
            fh.write("VECTORS u double\n")
            for a, b in zip(ux, uz):
                fh.write(f"{float(a)!r} {float(b)!r} 0.0\n")
            fh.write("SCALARS pi double 1\n")
            fh.write("LOOKUP_TABLE default\n")
            for v in sol.pi:
                fh.write(f"{float(v)!r}\n")
    except OSError as exc:
        raise OSError(f"cannot write VTK file {path!r}: {exc}") from exc


def vtk_series_path(directory: str, step: int) -> str:
    return os.path.join(directory, f"snapshot_{step:05d}.vtk")
