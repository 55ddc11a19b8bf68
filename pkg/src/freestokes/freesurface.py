"""Surface-velocity traces and the height update.

The trace samples the quadratic velocity on top facets at the surface
quadrature points (through the column map, so trace samples and surface-grid
integrals share quadrature). The height update assembles and solves the 1D
system in explicit, semi-implicit, or implicit mode, with the edge-jump
stabilization term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from freestokes import fem, linalg
from freestokes.mesh import SurfaceGrid, VolumeMesh
from freestokes.stokes import StokesSolution


@dataclass(frozen=True)
class SurfaceTrace:
    """Velocity samples on the free surface.

    uperp/uz: per-surface-cell quadrature samples (nc, nq); node_speed:
    Euclidean speed at every grid node, used for the edge coefficients.
    """

    uperp: np.ndarray
    uz: np.ndarray
    node_speed: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.uperp)) and np.all(np.isfinite(self.uz))
                and np.all(np.isfinite(self.node_speed))):
            raise ValueError("trace contains non-finite values")


@dataclass(frozen=True)
class HeightUpdate:
    h_new: np.ndarray
    dt: float
    mode: str
    gamma: np.ndarray
    residual: float


def extract_trace(mesh: VolumeMesh, sol: StokesSolution) -> SurfaceTrace:
    """Evaluate the velocity on top facets at the surface quadrature points."""
    nodes = sol.vspace.surface_facet_nodes  # (nc, 3) = (left, right, mid)
    ux = sol.u[2 * nodes]
    uz = sol.u[2 * nodes + 1]
    uperp_q = np.einsum("qa,ca->cq", fem.LINE_P2_VALS, ux)
    uz_q = np.einsum("qa,ca->cq", fem.LINE_P2_VALS, uz)
    top = np.arange(mesh.nx + 1) * (mesh.ny + 1) + mesh.ny
    speed = np.hypot(sol.u[2 * top], sol.u[2 * top + 1])
    return SurfaceTrace(uperp_q, uz_q, speed)


def gamma_coefficients(grid: SurfaceGrid, trace: SurfaceTrace) -> np.ndarray:
    """Edge coefficients gamma_e = 0.5 h_K^2 |u| at interior nodes.

    h_K is the larger of the two adjacent cell diameters; |u| the traced
    surface speed at the shared node.
    """
    dx = grid.cell_sizes
    hk = np.maximum(dx[:-1], dx[1:])
    return 0.5 * hk**2 * trace.node_speed[1:-1]


def advance_height(grid: SurfaceGrid, trace: SurfaceTrace, dt: float, mode: str,
                   a_fn=None, t: float = 0.0, edge_on: bool = True) -> HeightUpdate:
    """Advance the surface height by one step of size dt.

    Explicit mode takes all advection data from the trace at the old level;
    semi-implicit advects the new height with the old velocity; implicit
    expects a trace (and source time) already at the new level. A thickness
    violation in the result is the caller's to detect: h_new is returned
    unclipped.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    gamma = gamma_coefficients(grid, trace) if edge_on \
        else np.zeros(grid.n_nodes - 2)
    system, rhs = fem.assemble_free_surface(grid, trace, dt, mode, gamma, a_fn, t)
    h_new = linalg.factor_solve(system, rhs)
    scale = np.linalg.norm(rhs)
    residual = np.linalg.norm(system @ h_new - rhs) / scale if scale > 0 else 0.0
    if residual > 1e-11:
        raise linalg.SolverError(f"height solve residual {residual:.2e} > 1e-11")
    return HeightUpdate(h_new, dt, mode, gamma, residual)
