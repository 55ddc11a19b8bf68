import numpy as np
import pytest

from freestokes import fem
from freestokes.mesh import SurfaceGrid, build_extruded_mesh
from freestokes.stokes import (
    FluidParams,
    PicardNonConvergence,
    Stabilization,
    solve_newtonian,
    solve_picard,
    solve_stokes,
)

# frozen from the first verified run (residual checks on both saddle rows)
TANK40_MAX_SPEED = 3.341392220780103


def tank(nx=40, ny=40):
    x = np.linspace(-1, 1, nx + 1)
    g = SurfaceGrid(x, 0.5 * np.tanh(2 * x - 1) + 0.2, np.full_like(x, -1.0))
    return g, build_extruded_mesh(g, ny)


def flat(nx=8, ny=8, depth=1.0, top=1.0):
    x = np.linspace(-1, 1, nx + 1)
    g = SurfaceGrid(x, np.full_like(x, top), np.full_like(x, top - depth))
    return g, build_extruded_mesh(g, ny)


class TestFluidParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            FluidParams(rho=-1, g=9.82, mu0=1.0)
        with pytest.raises(ValueError):
            FluidParams(rho=1, g=9.82, mu0=1.0, p=1.0)
        with pytest.raises(ValueError):
            FluidParams(rho=1, g=9.82, mu0=1.0, delta=-1e-3)
        FluidParams(rho=1, g=0.0, mu0=1.0)  # rest state expressible


class TestSolveNewtonian:
    def test_flat_surface_is_hydrostatic(self):
        g, mesh = flat(depth=2.0, top=1.0)
        fluid = FluidParams(rho=1.0, g=9.82, mu0=0.55)
        sol = solve_newtonian(mesh, g, fluid)
        scale = fluid.rho * fluid.g * 2.0**2 / fluid.mu0
        assert np.abs(sol.u).max() <= 1e-9 * scale
        pi_exact = fluid.rho * fluid.g * (1.0 - mesh.vertices[:, 1])
        assert np.abs(sol.pi - pi_exact).max() <= 1e-9 * fluid.rho * fluid.g * 2.0
        assert sol.picard_iterations == 1

    def test_zero_gravity_is_rest(self):
        g, mesh = tank(8, 8)
        sol = solve_newtonian(mesh, g, FluidParams(rho=1.0, g=0.0, mu0=0.3))
        assert np.abs(sol.u).max() == 0.0
        assert np.abs(sol.pi).max() == 0.0

    def test_tank_max_speed_regression(self):
        g, mesh = tank()
        sol = solve_newtonian(mesh, g, FluidParams(rho=1.0, g=9.82, mu0=0.3))
        assert np.abs(sol.u).max() == pytest.approx(TANK40_MAX_SPEED, rel=1e-9)

    def test_requires_p2(self):
        g, mesh = flat()
        with pytest.raises(ValueError):
            solve_newtonian(mesh, g, FluidParams(rho=1, g=9.82, mu0=1.0, p=4 / 3))

    def test_bottom_dofs_exactly_zero(self):
        g, mesh = tank(10, 10)
        sol = solve_newtonian(mesh, g, FluidParams(rho=1.0, g=9.82, mu0=0.3))
        from freestokes.mesh import BOTTOM, LATERAL
        bottom = sol.vspace.nodes_by_marker[BOTTOM]
        lateral = sol.vspace.nodes_by_marker[LATERAL]
        assert np.all(sol.u[2 * bottom] == 0.0)
        assert np.all(sol.u[2 * bottom + 1] == 0.0)
        assert np.all(sol.u[2 * lateral] == 0.0)


class TestSolvePicard:
    def test_p2_reduces_to_newtonian(self):
        g, mesh = tank(10, 10)
        fluid = FluidParams(rho=1.0, g=9.82, mu0=0.3, p=2.0)
        s1 = solve_picard(mesh, g, fluid)
        s2 = solve_newtonian(mesh, g, fluid)
        assert np.array_equal(s1.u, s2.u)
        assert s1.picard_iterations == 1

    def test_flat_surface_p43_converges_fast(self):
        g, mesh = flat()
        fluid = FluidParams(rho=1.0, g=9.82, mu0=1.0, p=4 / 3, delta=1e-10)
        sol = solve_picard(mesh, g, fluid, tol=1e-6)
        assert sol.picard_iterations <= 2
        assert np.abs(sol.u).max() <= 1e-9 * fluid.rho * fluid.g / fluid.mu0

    def test_nonlinear_tank_converges_and_iteration_count_regression(self):
        g, mesh = tank(12, 12)
        fluid = FluidParams(rho=1.0, g=9.82, mu0=0.3, p=1.5, delta=1e-10)
        sol = solve_picard(mesh, g, fluid, tol=1e-6, max_iter=50)
        assert sol.final_relative_change < 1e-6
        assert sol.picard_iterations <= 30

    def test_max_iter_exceeded_carries_last_change(self):
        g, mesh = tank(8, 8)
        fluid = FluidParams(rho=1.0, g=9.82, mu0=0.3, p=1.5, delta=1e-10)
        with pytest.raises(PicardNonConvergence) as exc:
            solve_picard(mesh, g, fluid, tol=1e-14, max_iter=2)
        assert exc.value.relative_change > 0.0

    def test_dispatch(self):
        g, mesh = flat()
        s = solve_stokes(mesh, g, FluidParams(rho=1, g=9.82, mu0=1.0, p=4 / 3))
        assert s.picard_iterations >= 1


class TestStabilizedSolves:
    def test_stabilization_validation(self):
        with pytest.raises(ValueError):
            Stabilization(kind="bogus")
        with pytest.raises(ValueError):
            Stabilization(kind="fssa", dt=-1.0)

    def test_normal_penalty_keeps_rest_state_flat(self):
        # flat equilibrium: u = 0 makes the penalty term vanish identically
        g, mesh = flat()
        fluid = FluidParams(rho=1.0, g=9.82, mu0=1.0)
        sol = solve_newtonian(mesh, g, fluid, Stabilization("normal-penalty", dt=1.0))
        assert np.abs(sol.u).max() <= 1e-9 * fluid.rho * fluid.g / fluid.mu0

    def test_penalty_block_changes_moving_solution(self):
        g, mesh = tank(10, 10)
        fluid = FluidParams(rho=1.0, g=9.82, mu0=0.3)
        s0 = solve_newtonian(mesh, g, fluid)
        s1 = solve_newtonian(mesh, g, fluid, Stabilization("normal-penalty", dt=1.0))
        s2 = solve_newtonian(mesh, g, fluid, Stabilization("fssa", dt=1.0))
        assert np.abs(s1.u - s0.u).max() > 1e-3
        assert np.abs(s2.u - s0.u).max() > 1e-3
        assert np.abs(s1.u - s2.u).max() > 1e-4


class TestEnergyIdentities:
    def test_energy_identity_at_solution(self):
        # testing the solved momentum equation with v = u: no stabilization
        g, mesh = tank(20, 20)
        fluid = FluidParams(rho=1.0, g=9.82, mu0=0.3)
        sol = solve_newtonian(mesh, g, fluid)
        strain = fem.integrate_cell_samples(
            mesh, sol.mu_q * fem.strain_rate_sq(mesh, sol.u, vspace=sol.vspace))
        rhs = -fluid.rho * fluid.g * fem.integrate_dot_z(mesh, sol.u, vspace=sol.vspace)
        assert 2.0 * strain == pytest.approx(rhs, rel=1e-8)

    @pytest.mark.parametrize("p", [4.0 / 3.0, 1.5, 2.0])
    def test_lp_l2_viscosity_identity(self, p):
        # mu0 ||Du||_p^p == ||sqrt(mu) Du||_2^2 with delta = 0 samples
        g, mesh = tank(10, 10)
        rng = np.random.default_rng(7)
        vs = fem.velocity_space(mesh)
        u = rng.standard_normal(vs.ndofs)
        mu0 = 0.77
        du_sq = fem.strain_rate_sq(mesh, u, vspace=vs)
        mu = fem.viscosity_field(mesh, u, mu0, p, delta=0.0, vspace=vs)
        lp = mu0 * fem.integrate_cell_samples(mesh, du_sq ** (p / 2.0))
        l2 = fem.integrate_cell_samples(mesh, mu * du_sq)
        assert l2 == pytest.approx(lp, rel=1e-12)
