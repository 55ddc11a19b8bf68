"""Energy, conservation and convergence diagnostics.

Everything the stability analysis reasons about is computed here: the
viscous strain energy, the two sides of the per-step energy estimate, the
normalized energy (whose sign is the stability verdict), domain-volume
drift, the discrete change-of-domain identities, and the simultaneous
space/time convergence study.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from freestokes import fem
from freestokes.mesh import SurfaceGrid, VolumeMesh, domain_volume
from freestokes.stokes import StokesSolution


@dataclass
class DiagnosticsRecord:
    """Per-step ledger row.

    t and h_l2_sq refer to the step start; strain_energy is the squared
    viscosity-weighted strain norm of the step's momentum solve (on the old
    domain for the explicit schemes, on the new one for implicit Euler);
    volume is the post-step domain volume.
    """

    step: int
    t: float
    dt: float
    h_l2_sq: float
    h_new_l2_sq: float
    strain_energy: float
    E_L: float
    E_R: float
    volume: float
    volume_drift: float
    source_integral: float    # dt * int a dx at the scheme's source time
    a_l2_sq: float            # ||a||^2 at the scheme's source time
    picard_iters: int
    outer_iters: int


@dataclass
class EnergyLedger:
    """Records of one run plus what is needed to normalize them."""

    records: list = field(default_factory=list)
    initial_volume: float = 0.0
    failed: bool = False
    failure: Optional[str] = None

    def append(self, rec: DiagnosticsRecord):
        self.records.append(rec)

    @property
    def n_steps(self) -> int:
        return len(self.records)


def strain_energy(mesh: VolumeMesh, sol: StokesSolution,
                  mu_q: np.ndarray | None = None) -> float:
    """||sqrt(mu) D u||^2 = int mu |Du|^2, same quadrature as assembly."""
    mu = sol.mu_q if mu_q is None else mu_q
    du_sq = fem.strain_rate_sq(mesh, sol.u, vspace=sol.vspace)
    return fem.integrate_cell_samples(mesh, mu * du_sq)


def source_norms(grid: SurfaceGrid, a_fn, t: float):
    """(int a dx, ||a||^2, (a, h)) with the shared surface quadrature."""
    if a_fn is None:
        return 0.0, 0.0, 0.0
    xq, wq = fem.surface_quad_points(grid)
    aq = a_fn(xq, t)
    hq = np.interp(xq, grid.x, grid.h)
    return (float(np.sum(wq * aq)), float(np.sum(wq * aq * aq)),
            float(np.sum(wq * aq * hq)))


def energy_sides(grid: SurfaceGrid, h_new: np.ndarray, strain: float,
                 dt: float, rho: float, g: float, a_fn=None, t: float = 0.0):
    """Left and right sides of the per-step energy estimate.

    E_L = ||h^{n+1}||^2 + (4 dt / rho g) ||sqrt(mu) Du||^2,
    E_R = ||h^n||^2 + 2 dt (a^n, h^n) + dt^2 ||a^n||^2.
    """
    h_l2 = fem.surface_l2_sq(grid, grid.h)
    h_new_l2 = fem.surface_l2_sq(grid, h_new)
    _, a_sq, a_h = source_norms(grid, a_fn, t)
    e_l = h_new_l2 + 4.0 * dt / (rho * g) * strain
    e_r = h_l2 + 2.0 * dt * a_h + dt * dt * a_sq
    return e_l, e_r


def normalized_energy(ledger) -> np.ndarray:
    """E_bar^n = (E_L^n - E_R^n) / max_n |E_R^n| for a complete run."""
    records = ledger.records if hasattr(ledger, "records") else list(ledger)
    if not records:
        raise ValueError("empty ledger")
    e_l = np.array([r.E_L for r in records])
    e_r = np.array([r.E_R for r in records])
    denom = np.max(np.abs(e_r))
    if denom == 0.0:
        return np.zeros_like(e_l)
    return (e_l - e_r) / denom


def stability_verdict(ledger, tol: float = 1e-12) -> bool:
    """All-steps stability in the total energy norm: E_bar^n <= tol."""
    return bool(np.all(normalized_energy(ledger) <= tol))


def volume_series(ledger) -> np.ndarray:
    """Per-step drift |Omega^{n+1}| - |Omega^0| - sum dt*int a."""
    records = ledger.records if hasattr(ledger, "records") else list(ledger)
    vols = np.array([r.volume for r in records])
    src = np.cumsum([r.source_integral for r in records])
    return vols - ledger.initial_volume - src


def lemma_residuals(mesh: VolumeMesh, grid: SurfaceGrid, sol: StokesSolution,
                    w: np.ndarray):
    """Residuals of the two change-of-domain identities.

    r1: |(-uperp dx h + uz, w) - int_Gs (u.n) w ds| with the surface integral
    computed from facet geometry (vertex coordinates, facet normal/length).
    r2: |-rho g-free form: (zhat, u)_Omega - int_Gs (u.n) z ds| (the gravity
    factor cancels; multiply externally if needed).
    """
    nodes = sol.vspace.surface_facet_nodes
    E = fem.LINE_P2_VALS
    uxq = np.einsum("qa,ca->cq", E, sol.u[2 * nodes])
    uzq = np.einsum("qa,ca->cq", E, sol.u[2 * nodes + 1])
    s = grid.slopes()
    xq, wq = fem.surface_quad_points(grid)
    wvals = np.interp(xq, grid.x, w)
    lhs1 = np.sum(wq * (-uxq * s[:, None] + uzq) * wvals)
    lhs2 = fem.integrate_dot_z(mesh, sol.u, vspace=sol.vspace)

    rhs1 = 0.0
    rhs2 = 0.0
    for cell, fi in enumerate(mesh.top_facet_of_cell):
        v0, v1 = mesh.facets[fi]
        p0, p1 = mesh.vertices[v0], mesh.vertices[v1]
        tang = p1 - p0
        length = float(np.hypot(tang[0], tang[1]))
        nrm = np.array([-tang[1], tang[0]]) / length
        if nrm[1] < 0:
            nrm = -nrm
        un = uxq[cell] * nrm[0] + uzq[cell] * nrm[1]
        zq = p0[1] + fem.LINE_QP * tang[1]
        rhs1 += length * np.sum(fem.LINE_QW * un * wvals[cell])
        rhs2 += length * np.sum(fem.LINE_QW * un * zq)
    return abs(lhs1 - rhs1), abs(lhs2 - rhs2)


@dataclass
class ConvergenceLevel:
    dt: float
    dx_perp: float
    dx: float
    nx: int
    ny: int
    err_h: float = np.nan
    err_uperp: float = np.nan
    err_u: float = np.nan
    failed: bool = False
    message: str = ""


@dataclass
class ConvergenceReport:
    scheme: str
    levels: list
    order_h: float = np.nan
    order_uperp: float = np.nan
    order_u: float = np.nan


# the simultaneous refinement schedule and the reference resolution
CONVERGENCE_DTS = (0.5, 0.25, 0.125, 0.0625)
CONVERGENCE_DX_PERP = (0.2, 0.1, 0.05, 0.025)
CONVERGENCE_DX = (0.24, 0.11, 0.06, 0.03)
REFERENCE_DX_PERP = 0.0125
REFERENCE_DX = 0.015
REFERENCE_DT = 0.005
CONVERGENCE_T_FINAL = 1.0
CONVERGENCE_SCHEMES = ("EE_UNSTAB_W", "EE_STAB", "EE_FSSA", "SIE_FSSA")

# expected observed orders (brackets) per scheme and field
ORDER_BRACKETS = {
    "EE_UNSTAB_W": {"h": (0.7, 1.3), "uperp": (0.7, 1.3), "u": (1.6, 2.4)},
    "EE_STAB": {"h": (0.7, 1.3), "uperp": (0.7, 1.3), "u": (0.7, 1.3)},
    "EE_FSSA": {"h": (0.7, 1.3), "uperp": (0.7, 1.3), "u": (0.7, 1.3)},
    "SIE_FSSA": {"h": (0.7, 1.3), "uperp": (0.7, 1.3), "u": (0.7, 1.3)},
}


def expected_order_brackets(scheme: str):
    return ORDER_BRACKETS[scheme]


def _fit_order(dts, errs) -> float:
    """Least-squares slope of log(err) against log(dt) over >= 3 levels."""
    dts = np.asarray(dts, dtype=float)
    errs = np.asarray(errs, dtype=float)
    ok = np.isfinite(errs) & (errs > 0)
    if np.count_nonzero(ok) < 3:
        return np.nan
    return float(np.polyfit(np.log(dts[ok]), np.log(errs[ok]), 1)[0])


def evaluate_velocity(mesh: VolumeMesh, grid: SurfaceGrid, sol: StokesSolution,
                      points: np.ndarray) -> np.ndarray:
    """Evaluate the P2 velocity at physical points of the structured mesh.

    Points above the current surface (or below bedrock) are clamped to it
    vertically before lookup.
    """
    pts = np.atleast_2d(points)
    x = np.clip(pts[:, 0], grid.x[0], grid.x[-1])
    z = pts[:, 1]
    col = np.clip(np.searchsorted(grid.x, x, side="right") - 1, 0, grid.n_cells - 1)
    ny = mesh.ny
    hx = np.interp(x, grid.x, grid.h)
    bx = np.interp(x, grid.x, grid.b)
    srel = np.clip((z - bx) / (hx - bx), 0.0, 1.0)
    lay = np.clip((srel * ny).astype(int), 0, ny - 1)

    out = np.empty((pts.shape[0], 2))
    tri_of = 2 * (col * ny + lay)
    verts = mesh.vertices
    tris = mesh.triangles
    cn = sol.vspace.cell_nodes
    zc = bx + srel * (hx - bx)  # clamped physical z
    for k in range(pts.shape[0]):
        best = None
        for t in (tri_of[k], tri_of[k] + 1):
            p = verts[tris[t]]
            T = np.array([[p[1, 0] - p[0, 0], p[2, 0] - p[0, 0]],
                          [p[1, 1] - p[0, 1], p[2, 1] - p[0, 1]]])
            rhs = np.array([x[k] - p[0, 0], zc[k] - p[0, 1]])
            xi, eta = np.linalg.solve(T, rhs)
            lam = np.array([1 - xi - eta, xi, eta])
            if best is None or lam.min() > best[0]:
                best = (lam.min(), t, lam)
        _, t, lam = best
        l0, l1, l2 = lam
        vals = np.array([l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
                         4 * l1 * l2, 4 * l0 * l2, 4 * l0 * l1])
        nd = cn[t]
        out[k, 0] = vals @ sol.u[2 * nd]
        out[k, 1] = vals @ sol.u[2 * nd + 1]
    return out


def _interp_p1(x_src, vals, x_dst):
    return np.interp(x_dst, x_src, vals)


def _trace_values(grid: SurfaceGrid, sol: StokesSolution, x: np.ndarray):
    """Horizontal surface velocity as a function of x (piecewise quadratic)."""
    nodes = sol.vspace.surface_facet_nodes
    x = np.clip(x, grid.x[0], grid.x[-1])
    cell = np.clip(np.searchsorted(grid.x, x, side="right") - 1, 0, grid.n_cells - 1)
    xi = (x - grid.x[cell]) / grid.cell_sizes[cell]
    E = fem.line_p2_values(xi)  # (n, 3)
    ux = sol.u[2 * nodes[cell]]
    return np.sum(E * ux, axis=1)


def measure_errors(level_state, level_sol, ref_state, ref_sol):
    """Relative errors of a coarse run against the reference run.

    h and uperp in L2 on the horizontal domain (reference evaluated at the
    coarse grid's quadrature points), u in L2 on the reference mesh (coarse
    solution evaluated at the reference quadrature points).
    """
    g_c, g_r = level_state.grid, ref_state.grid
    xq, wq = fem.surface_quad_points(g_c)
    h_c = np.interp(xq, g_c.x, g_c.h)
    h_r = np.interp(xq, g_r.x, g_r.h)
    err_h = np.sqrt(np.sum(wq * (h_c - h_r) ** 2) / np.sum(wq * h_r**2))

    up_c = _trace_values(g_c, level_sol, xq.ravel()).reshape(xq.shape)
    up_r = _trace_values(g_r, ref_sol, xq.ravel()).reshape(xq.shape)
    err_up = np.sqrt(np.sum(wq * (up_c - up_r) ** 2) / np.sum(wq * up_r**2))

    pts = fem.cell_quad_points(ref_state.mesh).reshape(-1, 2)
    _, wdet = fem._geometry(ref_state.mesh)
    w = wdet.ravel()
    vs = ref_sol.vspace
    uref = np.empty((pts.shape[0], 2))
    uref[:, 0] = np.einsum("qi,ci->cq", fem.P2_VALS, ref_sol.u[2 * vs.cell_nodes]).ravel()
    uref[:, 1] = np.einsum("qi,ci->cq", fem.P2_VALS, ref_sol.u[2 * vs.cell_nodes + 1]).ravel()
    uc = evaluate_velocity(level_state.mesh, g_c, level_sol, pts)
    num = np.sum(w * np.sum((uc - uref) ** 2, axis=1))
    den = np.sum(w * np.sum(uref**2, axis=1))
    err_u = np.sqrt(num / den)
    return float(err_h), float(err_up), float(err_u)


def _max_initial_thickness(case) -> float:
    x = np.linspace(case.x0, case.x1, 4001)
    return float(np.max(case.height0(x) - case.bedrock(x)))


def _level_resolution(case, dx_perp: float, dx: float):
    nx = int(round((case.x1 - case.x0) / dx_perp))
    ny = int(np.ceil(_max_initial_thickness(case) / dx))
    return nx, max(ny, 1)


def _terminal_state(case, scheme_name: str, dt: float, nx: int, ny: int,
                    t_final: float):
    """Run a scheme to t_final and solve the momentum problem once more on
    the final geometry, including the scheme's stabilization block (the
    compared velocity carries the stabilization consistency error)."""
    from dataclasses import replace as _replace

    from freestokes import schemes
    from freestokes.stokes import solve_stokes

    level_case = _replace(case, nx=nx, ny=ny)
    kind = schemes.SchemeKind(scheme_name) if scheme_name != "EE_UNSTAB_W" \
        else schemes.SchemeKind(scheme_name, eps=0.9, dt_max=dt)
    cfg = schemes.SimConfig(case=level_case, scheme=kind, dt=dt,
                            t_final=t_final)
    result = schemes.run(cfg)
    if result.failed or result.final_state is None:
        raise RuntimeError(result.ledger.failure or "run failed")
    state = result.final_state
    stab = schemes._stabilization_for(scheme_name, dt, level_case.a_fn, state.t)
    sol = solve_stokes(state.mesh, state.grid, level_case.fluid, stab,
                       picard_tol=cfg.picard_tol,
                       picard_max_iter=cfg.picard_max_iter)
    return state, sol


def convergence_study(base_case, schemes=None, dts=CONVERGENCE_DTS,
                      dx_perps=CONVERGENCE_DX_PERP, dxs=CONVERGENCE_DX,
                      t_final=CONVERGENCE_T_FINAL, reference=None):
    """Simultaneous space/time refinement against a fine reference run.

    The reference is the weakly-stable explicit scheme at the pinned fine
    resolution; each level's errors are measured by evaluation transfer (see
    measure_errors). Failed levels are marked, not fatal.
    """
    scheme_names = list(schemes) if schemes else list(CONVERGENCE_SCHEMES)
    if reference is None:
        ref_nx, ref_ny = _level_resolution(base_case, REFERENCE_DX_PERP,
                                           REFERENCE_DX)
        reference = _terminal_state(base_case, "EE_UNSTAB_W", REFERENCE_DT,
                                    ref_nx, ref_ny, t_final)
    ref_state, ref_sol = reference

    reports = []
    for name in scheme_names:
        levels = []
        for dt, dxp, dx in zip(dts, dx_perps, dxs):
            nx, ny = _level_resolution(base_case, dxp, dx)
            level = ConvergenceLevel(dt=dt, dx_perp=dxp, dx=dx, nx=nx, ny=ny)
            try:
                st, sol = _terminal_state(base_case, name, dt, nx, ny, t_final)
                level.err_h, level.err_uperp, level.err_u = measure_errors(
                    st, sol, ref_state, ref_sol)
            except Exception as exc:  # a failed level is reported, not fatal
                level.failed = True
                level.message = str(exc)
            levels.append(level)
        rep = ConvergenceReport(scheme=name, levels=levels)
        used = [lv for lv in levels if not lv.failed]
        rep.order_h = _fit_order([lv.dt for lv in used], [lv.err_h for lv in used])
        rep.order_uperp = _fit_order([lv.dt for lv in used],
                                     [lv.err_uperp for lv in used])
        rep.order_u = _fit_order([lv.dt for lv in used], [lv.err_u for lv in used])
        reports.append(rep)
    return reports
