"""Stokes solves on a given mesh: linear for Newtonian fluids, Picard
iteration for power-law viscosity, with optional surface stabilization
blocks folded into the momentum equation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from freestokes import fem, linalg
from freestokes.mesh import SurfaceGrid, VolumeMesh


class PicardNonConvergence(Exception):
    def __init__(self, iterations: int, relative_change: float):
        super().__init__(
            f"Picard did not converge in {iterations} iterations "
            f"(last relative change {relative_change:.3e})")
        self.iterations = iterations
        self.relative_change = relative_change


@dataclass(frozen=True)
class FluidParams:
    """Density, gravity and power-law rheology parameters."""

    rho: float
    g: float
    mu0: float
    p: float = 2.0
    delta: float = 1e-10  # strain-rate regularizer, keeps mu finite at Du = 0

    def __post_init__(self):
        # g = 0 is allowed so the rest state stays expressible
        if self.rho <= 0 or self.g < 0 or self.mu0 <= 0:
            raise ValueError("rho and mu0 must be positive, g nonnegative")
        if not 1.0 < self.p <= 2.0:
            raise ValueError(f"p={self.p} outside (1, 2]")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")


@dataclass(frozen=True)
class Stabilization:
    """Surface stabilization folded into the momentum equation.

    kind "normal-penalty" adds (rho g dt/2) int omega (u.n)(v.n) ds plus the
    source load; "fssa" adds the non-symmetric rho g dt int (u.n)(zhat.v) ds
    plus its load. Both loads sit on the left side of the momentum equation,
    so they are subtracted from the gravity load before solving.
    """

    kind: str = "none"
    dt: float = 0.0
    a_fn: Optional[Callable] = None
    t: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "normal-penalty", "fssa"):
            raise ValueError(f"unknown stabilization {self.kind!r}")
        if self.dt < 0:
            raise ValueError("dt must be >= 0")


NO_STAB = Stabilization()


@dataclass
class StokesSolution:
    u: np.ndarray
    pi: np.ndarray
    picard_iterations: int
    final_relative_change: float
    mu_q: np.ndarray          # viscosity samples frozen in the final solve
    vspace: fem.VelocitySpace = field(repr=False)
    pspace: fem.PressureSpace = field(repr=False)


def _stab_block(mesh, grid, fluid, stab, vspace):
    if stab.kind == "none" or stab.dt == 0.0:
        return None, None
    if stab.kind == "normal-penalty":
        return fem.assemble_normal_penalty(mesh, grid, stab.dt, fluid.rho, fluid.g,
                                           stab.a_fn, stab.t, vspace=vspace)
    return fem.assemble_fssa(mesh, grid, stab.dt, fluid.rho, fluid.g,
                             stab.a_fn, stab.t, vspace=vspace)


def _linear_solve(mesh, grid, fluid, mu_q, stab_matrix, rhs, vspace, pspace):
    A, B = fem.assemble_stokes(mesh, mu_q, vspace=vspace, pspace=pspace)
    if stab_matrix is not None:
        A = (A + stab_matrix).tocsr()
    A, B, f, _ = fem.apply_velocity_bcs(A, B, rhs, vspace)
    return linalg.solve_saddle(linalg.SaddleSystem(A, B, f))


def solve_newtonian(mesh: VolumeMesh, grid: SurfaceGrid, fluid: FluidParams,
                    stab: Stabilization = NO_STAB,
                    vspace: fem.VelocitySpace | None = None,
                    pspace: fem.PressureSpace | None = None) -> StokesSolution:
    """One linear solve with mu = mu0 (requires p = 2)."""
    if fluid.p != 2.0:
        raise ValueError("solve_newtonian requires p = 2")
    vspace = vspace or fem.velocity_space(mesh)
    pspace = pspace or fem.pressure_space(mesh)
    mu_q = np.full((mesh.n_triangles, fem.TRI_QW.size), fluid.mu0)
    f = fem.assemble_gravity(mesh, fluid.rho, fluid.g, vspace=vspace)
    S, r = _stab_block(mesh, grid, fluid, stab, vspace)
    rhs = f if r is None else f - r
    u, pi = _linear_solve(mesh, grid, fluid, mu_q, S, rhs, vspace, pspace)
    return StokesSolution(u, pi, 1, 0.0, mu_q, vspace, pspace)


def solve_picard(mesh: VolumeMesh, grid: SurfaceGrid, fluid: FluidParams,
                 stab: Stabilization = NO_STAB, tol: float = 1e-6,
                 max_iter: int = 50,
                 vspace: fem.VelocitySpace | None = None,
                 pspace: fem.PressureSpace | None = None) -> StokesSolution:
    """Fixed-point iteration on the power-law viscosity, starting from u = 0.

    Stops when the relative velocity increment drops below tol. With p = 2
    the problem is linear and this reduces to solve_newtonian.
    """
    if fluid.p == 2.0:
        return solve_newtonian(mesh, grid, fluid, stab, vspace=vspace, pspace=pspace)
    vspace = vspace or fem.velocity_space(mesh)
    pspace = pspace or fem.pressure_space(mesh)
    f = fem.assemble_gravity(mesh, fluid.rho, fluid.g, vspace=vspace)
    S, r = _stab_block(mesh, grid, fluid, stab, vspace)
    rhs = f if r is None else f - r

    u = np.zeros(vspace.ndofs)
    rel = np.inf
    for k in range(1, max_iter + 1):
        mu_q = fem.viscosity_field(mesh, u, fluid.mu0, fluid.p, fluid.delta,
                                   vspace=vspace)
        u_new, pi = _linear_solve(mesh, grid, fluid, mu_q, S, rhs, vspace, pspace)
        norm_new = np.linalg.norm(u_new)
        rel = np.linalg.norm(u_new - u) / norm_new if norm_new > 0 else 0.0
        u = u_new
        if rel < tol:
            return StokesSolution(u, pi, k, rel, mu_q, vspace, pspace)
    raise PicardNonConvergence(max_iter, rel)


def solve_stokes(mesh: VolumeMesh, grid: SurfaceGrid, fluid: FluidParams,
                 stab: Stabilization = NO_STAB, picard_tol: float = 1e-6,
                 picard_max_iter: int = 50,
                 vspace: fem.VelocitySpace | None = None,
                 pspace: fem.PressureSpace | None = None) -> StokesSolution:
    """Dispatch on the rheology exponent."""
    if fluid.p == 2.0:
        return solve_newtonian(mesh, grid, fluid, stab, vspace=vspace, pspace=pspace)
    return solve_picard(mesh, grid, fluid, stab, tol=picard_tol,
                        max_iter=picard_max_iter, vspace=vspace, pspace=pspace)
