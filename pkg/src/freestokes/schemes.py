"""Time-stepping drivers coupling Stokes solves, height updates and remaps.

Six schemes: implicit Euler (IE, outer fixed point across the coupled
problem), unstabilized explicit Euler (EE_UNSTAB), the same with the
weakly-stable adaptive step (EE_UNSTAB_W), the normal-penalty stabilized
explicit Euler (EE_STAB), FSSA-stabilized explicit Euler (EE_FSSA), and the
FSSA-stabilized semi-implicit Euler (SIE_FSSA).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from freestokes import fem, diagnostics
from freestokes.diagnostics import DiagnosticsRecord, EnergyLedger
from freestokes.freesurface import advance_height, extract_trace
from freestokes.mesh import (
    GeometryError,
    SurfaceGrid,
    VolumeMesh,
    build_extruded_mesh,
    domain_volume,
    remap_vertical,
)
from freestokes.stokes import (
    FluidParams,
    Stabilization,
    StokesSolution,
    solve_stokes,
)

SCHEME_NAMES = ("IE", "EE_UNSTAB", "EE_UNSTAB_W", "EE_STAB", "EE_FSSA", "SIE_FSSA")


class OuterNonConvergence(Exception):
    def __init__(self, iterations: int, relative_change: float):
        super().__init__(
            f"implicit coupling did not converge in {iterations} iterations "
            f"(last relative change {relative_change:.3e})")
        self.iterations = iterations
        self.relative_change = relative_change


class StepFailure(Exception):
    """A step could not complete; carries the diagnostics gathered so far."""

    def __init__(self, message: str, record: Optional[DiagnosticsRecord] = None):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class SchemeKind:
    name: str
    eps: float = 0.9          # weak-stability fraction, EE_UNSTAB_W only
    dt_max: Optional[float] = None  # cap for the adaptive step (default: nominal dt)

    def __post_init__(self):
        if self.name not in SCHEME_NAMES:
            raise ValueError(f"unknown scheme {self.name!r}")
        if self.name == "EE_UNSTAB_W" and not 0.0 < self.eps < 1.0:
            raise ValueError("eps must be in (0, 1)")
        if self.dt_max is not None and self.dt_max <= 0.0:
            raise ValueError("dt_max must be positive")


@dataclass
class SimState:
    grid: SurfaceGrid
    mesh: VolumeMesh
    t: float = 0.0
    n: int = 0
    last_solution: Optional[StokesSolution] = None


@dataclass
class SimConfig:
    """Scheme, time stepping, tolerances and output sinks for one run."""

    case: object               # CaseConfig-like: build_grid(), ny, fluid, a_fn
    scheme: SchemeKind
    dt: float
    t_final: float
    edge_stab: bool = True
    coupling_tol: float = 1e-8
    max_outer: int = 50
    picard_tol: float = 1e-6
    picard_max_iter: int = 50
    csv_path: Optional[str] = None
    vtk_dir: Optional[str] = None
    vtk_every: int = 1
    # scratch for the implicit coupling (FD Jacobian reuse across steps)
    coupling_cache: Optional[dict] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.dt <= 0 or self.t_final < 0:
            raise ValueError("dt must be positive and t_final nonnegative")
        if not 0.0 < self.coupling_tol < 1.0 or not 0.0 < self.picard_tol < 1.0:
            raise ValueError("tolerances must be in (0, 1)")
        if self.vtk_every < 1:
            raise ValueError("vtk cadence must be >= 1")


@dataclass
class RunResult:
    ledger: EnergyLedger
    final_state: Optional[SimState] = None

    @property
    def records(self):
        return self.ledger.records

    @property
    def failed(self) -> bool:
        return self.ledger.failed


def initial_state(cfg: SimConfig) -> SimState:
    grid = cfg.case.build_grid()
    return SimState(grid, build_extruded_mesh(grid, cfg.case.ny))


def weak_stable_dt(state: SimState, eps: float, dt_max: float, a_fn,
                   fluid: FluidParams, t: float = 0.0) -> float:
    """Largest weakly-stable step for the unstabilized explicit scheme.

    dt = min(dt_max, eps (4/rho g) ||sqrt(mu) Du||^2 /
             (int omega (u.n)^2 ds + 2 int (u.n) a ds)),
    falling back to dt_max when the denominator is nonpositive.
    """
    sol = state.last_solution
    if sol is None:
        raise ValueError("weak_stable_dt needs a Stokes solution on the state")
    grid = state.grid
    strain = diagnostics.strain_energy(state.mesh, sol)
    tr = extract_trace(state.mesh, sol)
    kin = fem.kinematic_samples(grid, tr)          # = omega (u.n) pointwise
    xq, wq = fem.surface_quad_points(grid)
    denom = float(np.sum(wq * kin * kin))          # int omega (u.n)^2 ds
    if a_fn is not None:
        # int (u.n) a ds = int omega (u.n) a dx
        denom += 2.0 * float(np.sum(wq * kin * a_fn(xq, t)))
    if denom <= 0.0:
        return dt_max
    return min(dt_max, eps * (4.0 / (fluid.rho * fluid.g)) * strain / denom)


def _stabilization_for(scheme: str, dt: float, a_fn, t: float) -> Stabilization:
    if scheme == "EE_STAB":
        return Stabilization("normal-penalty", dt, a_fn, t)
    if scheme in ("EE_FSSA", "SIE_FSSA"):
        return Stabilization("fssa", dt, a_fn, t)
    return Stabilization()


def _record(state: SimState, cfg: SimConfig, dt: float, sol: StokesSolution,
            h_new: np.ndarray, strain: float, t_src: float,
            outer_iters: int) -> DiagnosticsRecord:
    grid = state.grid
    fluid = cfg.case.fluid
    a_fn = cfg.case.a_fn
    e_l, e_r = diagnostics.energy_sides(grid, h_new, strain, dt,
                                        fluid.rho, fluid.g, a_fn, t_src)
    a_int, a_sq, _ = diagnostics.source_norms(grid, a_fn, t_src)
    vol_new = domain_volume(grid.with_height(h_new)) \
        if np.all(h_new - grid.b > 0) else float(np.trapezoid(h_new - grid.b, grid.x))
    return DiagnosticsRecord(
        step=state.n, t=state.t, dt=dt,
        h_l2_sq=fem.surface_l2_sq(grid, grid.h),
        h_new_l2_sq=fem.surface_l2_sq(grid, h_new),
        strain_energy=strain,
        E_L=e_l, E_R=e_r,
        volume=vol_new, volume_drift=np.nan,
        source_integral=dt * a_int, a_l2_sq=a_sq,
        picard_iters=sol.picard_iterations, outer_iters=outer_iters)


def _advance_state(state: SimState, cfg: SimConfig, dt: float,
                   sol: StokesSolution, h_new: np.ndarray) -> SimState:
    grid_new = state.grid.with_height(h_new)  # raises on thickness violation
    mesh_new = remap_vertical(state.mesh, state.grid, grid_new)
    return SimState(grid_new, mesh_new, state.t + dt, state.n + 1, sol)


def _explicit_family_step(state: SimState, cfg: SimConfig, dt: float):
    scheme = cfg.scheme.name
    grid, mesh = state.grid, state.mesh
    fluid, a_fn = cfg.case.fluid, cfg.case.a_fn
    t = state.t

    stab = _stabilization_for(scheme, dt, a_fn, t)
    sol = solve_stokes(mesh, grid, fluid, stab, picard_tol=cfg.picard_tol,
                       picard_max_iter=cfg.picard_max_iter)

    if scheme == "EE_UNSTAB_W":
        dt_max = cfg.scheme.dt_max if cfg.scheme.dt_max is not None else cfg.dt
        probe = SimState(grid, mesh, t, state.n, sol)
        dt = min(dt, weak_stable_dt(probe, cfg.scheme.eps, dt_max, a_fn, fluid, t))

    strain = diagnostics.strain_energy(mesh, sol)
    trace = extract_trace(mesh, sol)
    mode = "semi-implicit" if scheme == "SIE_FSSA" else "explicit"
    upd = advance_height(grid, trace, dt, mode, a_fn=a_fn, t=t,
                         edge_on=cfg.edge_stab)
    rec = _record(state, cfg, dt, sol, upd.h_new, strain, t, outer_iters=0)
    try:
        new_state = _advance_state(state, cfg, dt, sol, upd.h_new)
    except GeometryError as exc:
        raise StepFailure(f"step {state.n}: {exc}", rec) from exc
    return new_state, rec


def _implicit_step(state: SimState, cfg: SimConfig, dt: float):
    """Outer iteration across the coupled problem: rebuild the domain from
    the height iterate, solve Stokes at the new time level, redo the
    implicit height solve.

    The plain fixed point diverges once dt exceeds the fastest surface
    relaxation time (coupling-Jacobian eigenvalues grow past 1). The
    residual equation h - G(h) = 0 is therefore solved by Anderson
    acceleration while it contracts and by Levenberg-Marquardt with a
    finite-difference coupling Jacobian when it does not; if the direct
    solve stalls, the step is re-solved by continuation in dt (quarter,
    half, full) with the earlier stages as warm starts. One outer iteration
    means one accepted update of the height iterate; the FD Jacobian
    (cached across steps) is inner machinery. Every trial geometry keeps
    positive thickness.
    """
    grid, mesh = state.grid, state.mesh
    fluid, a_fn = cfg.case.fluid, cfg.case.a_fn
    t_new = state.t + dt
    # trial geometries stay clear of degeneracy; a genuinely thin solution
    # is reported as a thickness violation when the state is advanced
    floor = 1e-2 * float(np.min(grid.thickness))
    last = {}
    cache = cfg.coupling_cache if cfg.coupling_cache is not None else {}

    def fixed_point_map(h_iter, dt_stage):
        grid_k = grid.with_height(h_iter)
        mesh_k = remap_vertical(mesh, grid, grid_k)
        sol_k = solve_stokes(mesh_k, grid_k, fluid, picard_tol=cfg.picard_tol,
                             picard_max_iter=cfg.picard_max_iter)
        trace = extract_trace(mesh_k, sol_k)
        upd = advance_height(grid, trace, dt_stage, "implicit", a_fn=a_fn,
                             t=t_new, edge_on=cfg.edge_stab)
        last.update(mesh_k=mesh_k, sol=sol_k, h_new=upd.h_new)
        return upd.h_new

    def feasible(h_iter):
        return bool(np.all(h_iter - grid.b > floor))

    def try_residual(h_iter, dt_stage):
        """None when the trial geometry breaks the solver (reject trial)."""
        from freestokes.linalg import SolverError
        from freestokes.stokes import PicardNonConvergence
        try:
            gx = fixed_point_map(h_iter, dt_stage)
            return gx, h_iter - gx
        except (SolverError, PicardNonConvergence, GeometryError):
            return None

    def fd_jacobian(x, gx, dt_stage):
        n = x.size
        dg = np.empty((n, n))
        eps = 1e-7 * max(1.0, float(np.max(np.abs(x))))
        for i in range(n):
            xp = x.copy()
            xp[i] += eps
            dg[:, i] = (fixed_point_map(xp, dt_stage) - gx) / eps
        return np.eye(n) - dg

    def rel_of(res, gx):
        return np.linalg.norm(res) / max(np.linalg.norm(gx), 1e-300)

    class StageStall(Exception):
        def __init__(self, rel):
            self.rel = rel

    def solve_stage(dt_stage, x0, tol, budget):
        """Returns (x, accepted-update count); raises StageStall."""
        x = x0.copy()
        hit = try_residual(x, dt_stage)
        if hit is None:
            raise StageStall(np.inf)
        gx, res = hit
        rel = rel_of(res, gx)
        accepts = 0
        xs, fs = [], []
        anderson_ok = True
        jac = cache.get("jac") if cache.get("jac_dt") == dt_stage else None
        jac_at = None
        lam = 1e-8
        while rel >= tol:
            if accepts >= budget:
                raise StageStall(rel)
            accepted = False
            if anderson_ok:
                xs.append(x.copy())
                fs.append(-res)
                if len(xs) > 10:
                    xs.pop(0)
                    fs.pop(0)
                if len(xs) >= 2:
                    dF = np.column_stack([fs[i + 1] - fs[i]
                                          for i in range(len(fs) - 1)])
                    dX = np.column_stack([xs[i + 1] - xs[i]
                                          for i in range(len(xs) - 1)])
                    gamma, *_ = np.linalg.lstsq(dF, -res, rcond=1e-12)
                    step_vec = -res - (dX + dF) @ gamma
                else:
                    step_vec = -res
                cap = 0.25 * float(np.min(grid.thickness))
                norm_inf = np.linalg.norm(step_vec, np.inf)
                if norm_inf > cap:
                    step_vec *= cap / norm_inf
                beta = 1.0
                trial = x + step_vec
                while not feasible(trial) and beta > 1e-8:
                    beta *= 0.5
                    trial = x + beta * step_vec
                hit = try_residual(trial, dt_stage) if feasible(trial) else None
                if hit is None:
                    anderson_ok = False
                else:
                    gt, res_t = hit
                    if np.linalg.norm(res_t) < 0.7 * np.linalg.norm(res):
                        x, gx, res = trial, gt, res_t
                        accepted = True
                    else:
                        anderson_ok = False   # stalled: Levenberg-Marquardt
                        if np.linalg.norm(res_t) < np.linalg.norm(res):
                            x, gx, res = trial, gt, res_t
                            accepted = True
            if not anderson_ok and not accepted:
                if jac is None or (jac_at is not None
                                   and np.linalg.norm(x - jac_at) >
                                   0.05 * max(np.linalg.norm(x), 1.0)):
                    jac = fd_jacobian(x, gx, dt_stage)
                    jac_at = x.copy()
                    cache["jac"] = jac
                    cache["jac_dt"] = dt_stage
                jtj = jac.T @ jac
                jtr = jac.T @ res
                diag = np.diag(np.maximum(np.diag(jtj), 1e-30))
                for _ in range(60):
                    delta = np.linalg.solve(jtj + lam * diag, -jtr)
                    trial = x + delta
                    hit = try_residual(trial, dt_stage) if feasible(trial) else None
                    if hit is not None:
                        gt, res_t = hit
                        if np.linalg.norm(res_t) < np.linalg.norm(res):
                            gain = np.linalg.norm(res_t) / np.linalg.norm(res)
                            x, gx, res = trial, gt, res_t
                            lam = max(lam / 3.0, 1e-14)
                            accepted = True
                            if gain > 0.5:
                                jac = fd_jacobian(x, gx, dt_stage)
                                jac_at = x.copy()
                                cache["jac"] = jac
                                cache["jac_dt"] = dt_stage
                            break
                    lam *= 4.0
                    if lam > 1e12:
                        break
                if not accepted:
                    raise StageStall(rel)
            accepts += 1
            rel = rel_of(res, gx)
        return x, accepts

    try:
        x, outer_iters = solve_stage(dt, grid.h, cfg.coupling_tol, cfg.max_outer)
    except StageStall:
        # re-solve by continuation in dt, warm-starting each stage
        x = grid.h.copy()
        outer_iters = 0
        loose = max(1e-5, 100.0 * cfg.coupling_tol)
        try:
            for frac in (0.25, 0.5, 1.0):
                tol_stage = cfg.coupling_tol if frac == 1.0 else loose
                x, accepts = solve_stage(frac * dt, x, tol_stage,
                                         cfg.max_outer - outer_iters)
                outer_iters += accepts
        except StageStall as exc:
            raise StepFailure(
                f"step {state.n}: "
                + str(OuterNonConvergence(cfg.max_outer, exc.rel))) from exc
        # the intermediate stages leave 'last' at the full-dt solve

    # accept the converged pair: u on the final geometry, h from its solve
    sol = last["sol"]
    strain = diagnostics.strain_energy(last["mesh_k"], sol)
    rec = _record(state, cfg, dt, sol, last["h_new"], strain, t_new,
                  outer_iters=max(outer_iters, 1))
    try:
        new_state = _advance_state(state, cfg, dt, sol, last["h_new"])
    except GeometryError as exc:
        raise StepFailure(f"step {state.n}: {exc}", rec) from exc
    return new_state, rec


def step(state: SimState, cfg: SimConfig, dt: Optional[float] = None):
    """Advance one step; returns (new_state, DiagnosticsRecord)."""
    dt = cfg.dt if dt is None else dt
    if cfg.scheme.name == "IE":
        return _implicit_step(state, cfg, dt)
    return _explicit_family_step(state, cfg, dt)


def run(cfg: SimConfig) -> RunResult:
    """March from t = 0 to t_final, one record per step.

    The last step is clipped to land on t_final exactly. On failure a
    partial series is returned with the failure marker set.
    """
    state = initial_state(cfg)
    if cfg.scheme.name == "IE" and cfg.coupling_cache is None:
        cfg.coupling_cache = {}
    ledger = EnergyLedger(initial_volume=domain_volume(state.grid))
    source_accum = 0.0
    guard = 1e-12 * max(cfg.t_final, cfg.dt)
    while state.t < cfg.t_final - guard:
        dt = min(cfg.dt, cfg.t_final - state.t)
        try:
            state, rec = step(state, cfg, dt)
        except StepFailure as exc:
            if exc.record is not None:
                exc.record.volume_drift = (exc.record.volume - ledger.initial_volume
                                           - source_accum - exc.record.source_integral)
                ledger.append(exc.record)
            ledger.failed = True
            ledger.failure = str(exc)
            return RunResult(ledger, None)
        source_accum += rec.source_integral
        rec.volume_drift = rec.volume - ledger.initial_volume - source_accum
        ledger.append(rec)
    return RunResult(ledger, state)
