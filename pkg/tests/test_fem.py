import math

import numpy as np
import pytest
import scipy.sparse as sp

from freestokes import fem
from freestokes.fem import (
    AssemblyError,
    LINE_QP,
    LINE_QW,
    TRI_QP,
    TRI_QW,
    assemble_free_surface,
    assemble_fssa,
    assemble_gravity,
    assemble_normal_penalty,
    assemble_stokes,
    apply_velocity_bcs,
    edge_jump_matrix,
    surface_quad_points,
    velocity_space,
    viscosity_field,
)
from freestokes.mesh import BOTTOM, LATERAL, SurfaceGrid, build_extruded_mesh


def unit_square_mesh(n=4):
    x = np.linspace(0.0, 1.0, n + 1)
    g = SurfaceGrid(x, np.ones_like(x), np.zeros_like(x))
    return g, build_extruded_mesh(g, n)


def reference_triangle_mesh():
    """One-cell mesh on the reference triangle (0,0)-(1,0)-(0,1)."""
    g = SurfaceGrid(np.array([0.0, 1.0]), np.array([1.0, 1e-12 + 0.0]),
                    np.zeros(2))
    # build by hand instead: vertices of the reference triangle
    from freestokes.mesh import VolumeMesh
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    tris = np.array([[0, 1, 2]])
    facets = np.array([[0, 1], [1, 2], [2, 0]])
    markers = np.array([BOTTOM, 1, LATERAL])
    return VolumeMesh(verts, tris, facets, markers, np.array([1]), nx=1, ny=1)


class TestQuadrature:
    def test_triangle_rule_exact_to_degree_4(self):
        # reference-triangle monomial integrals: a! b! / (a+b+2)!
        xi = TRI_QP[:, 1]
        eta = TRI_QP[:, 2]
        for a in range(5):
            for b in range(5 - a):
                exact = math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)
                approx = np.sum(TRI_QW * xi**a * eta**b)
                assert approx == pytest.approx(exact, rel=1e-14), (a, b)

    def test_weights_positive_and_sum_to_measure(self):
        assert np.all(TRI_QW > 0)
        assert np.sum(TRI_QW) == pytest.approx(0.5, rel=1e-15)
        assert np.all(LINE_QW > 0)
        assert np.sum(LINE_QW) == pytest.approx(1.0, rel=1e-15)

    def test_line_rule_exact_to_degree_5(self):
        for k in range(6):
            assert np.sum(LINE_QW * LINE_QP**k) == pytest.approx(1.0 / (k + 1), rel=1e-14)


class TestBasis:
    def test_p2_partition_of_unity(self):
        assert np.allclose(fem.P2_VALS.sum(axis=1), 1.0, atol=1e-14)
        assert np.allclose(fem.P2_GRADS.sum(axis=1), 0.0, atol=1e-13)

    def test_line_p2_nodal(self):
        v = fem.line_p2_values(np.array([0.0, 1.0, 0.5]))
        assert np.allclose(v, np.eye(3), atol=1e-15)


def sympy_local_viscous_matrix():
    """Oracle: exact viscous matrix on the reference triangle via sympy."""
    import sympy as sym

    xi, eta = sym.symbols("xi eta")
    l0, l1, l2 = 1 - xi - eta, xi, eta
    basis = [l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
             4 * l1 * l2, 4 * l0 * l2, 4 * l0 * l1]

    def sym_grad(comp, n):
        gx, gz = sym.diff(n, xi), sym.diff(n, eta)
        if comp == 0:
            return sym.Matrix([[gx, gz / 2], [gz / 2, 0]])
        return sym.Matrix([[0, gx / 2], [gx / 2, gz]])

    A = np.zeros((12, 12))
    for i in range(6):
        for ci in range(2):
            for j in range(6):
                for cj in range(2):
                    di = sym_grad(ci, basis[i])
                    dj = sym_grad(cj, basis[j])
                    integrand = 2 * sum(di[a, b] * dj[a, b]
                                        for a in range(2) for b in range(2))
                    val = sym.integrate(sym.integrate(integrand, (eta, 0, 1 - xi)),
                                        (xi, 0, 1))
                    A[2 * i + ci, 2 * j + cj] = float(val)
    return A


class TestAssembleStokes:
    def test_zero_viscosity_gives_zero_operator(self):
        _, mesh = unit_square_mesh(2)
        mu = np.zeros((mesh.n_triangles, TRI_QW.size))
        A, _ = assemble_stokes(mesh, mu)
        assert A.nnz == 0 or np.max(np.abs(A.data)) == 0.0

    def test_negative_viscosity_rejected(self):
        _, mesh = unit_square_mesh(2)
        mu = np.full((mesh.n_triangles, TRI_QW.size), -1.0)
        with pytest.raises(AssemblyError):
            assemble_stokes(mesh, mu)

    def test_single_reference_triangle_matches_sympy_oracle(self):
        mesh = reference_triangle_mesh()
        mu = np.ones((1, TRI_QW.size))
        A, _ = assemble_stokes(mesh, mu)
        vs = velocity_space(mesh)
        # reorder computed A into (node, component) blocks of the oracle
        nodes = vs.cell_nodes[0]
        dofs = np.empty(12, dtype=int)
        dofs[0::2] = 2 * nodes
        dofs[1::2] = 2 * nodes + 1
        A_local = A.toarray()[np.ix_(dofs, dofs)]
        A_exact = sympy_local_viscous_matrix()
        assert np.max(np.abs(A_local - A_exact)) < 1e-13

    def test_symmetry(self):
        g, mesh = unit_square_mesh(5)
        rng = np.random.default_rng(0)
        mu = 0.5 + rng.random((mesh.n_triangles, TRI_QW.size))
        A, _ = assemble_stokes(mesh, mu)
        d = A - A.T
        assert np.max(np.abs(d.data)) if d.nnz else 0.0 <= 1e-14 * np.max(np.abs(A.data))

    def test_divergence_operator_on_linear_field(self):
        # u = (x, -z) has div u = 0; B u integrates q * div(u) = 0
        g, mesh = unit_square_mesh(4)
        vs = velocity_space(mesh)
        A, B = assemble_stokes(mesh, np.ones((mesh.n_triangles, TRI_QW.size)), vs)
        u = np.empty(vs.ndofs)
        u[0::2] = vs.node_coords[:, 0]
        u[1::2] = -vs.node_coords[:, 1]
        assert np.max(np.abs(B @ u)) < 1e-13


class TestAssembleGravity:
    def test_zero_gravity(self):
        _, mesh = unit_square_mesh(3)
        assert np.all(assemble_gravity(mesh, 1.0, 0.0) == 0.0)

    def test_only_vertical_dofs_loaded(self):
        _, mesh = unit_square_mesh(3)
        f = assemble_gravity(mesh, 1.0, 9.82)
        assert np.all(f[0::2] == 0.0)

    def test_partition_of_unity_total_load(self):
        # constant unit vertical field on the unit square: total load -rho g S
        _, mesh = unit_square_mesh(4)
        vs = velocity_space(mesh)
        f = assemble_gravity(mesh, 1.0, 9.82, vspace=vs)
        ez = np.zeros(vs.ndofs)
        ez[1::2] = 1.0
        assert ez @ f == pytest.approx(-9.82, rel=1e-12)


class TestNormalPenalty:
    def test_dt_zero(self):
        g, mesh = unit_square_mesh(3)
        S, r = assemble_normal_penalty(mesh, g, 0.0, 1.0, 9.82,
                                       lambda x, t: np.ones_like(x), 0.0)
        assert S.nnz == 0 or np.max(np.abs(S.data)) == 0.0
        assert np.all(r == 0.0)

    def test_flat_top_constant_vertical_field(self):
        g, mesh = unit_square_mesh(5)
        vs = velocity_space(mesh)
        dt, rho, grav = 0.7, 1.3, 9.82
        S, _ = assemble_normal_penalty(mesh, g, dt, rho, grav, vspace=vs)
        ez = np.zeros(vs.ndofs)
        ez[1::2] = 1.0
        assert ez @ S @ ez == pytest.approx(0.5 * rho * grav * dt * 1.0, rel=1e-13)

    def test_sloped_facet_matches_dense_oracle(self):
        # single cell, slope 3/4: omega = 1.25
        g = SurfaceGrid(np.array([0.0, 0.8]), np.array([1.0, 1.6]), np.zeros(2))
        mesh = build_extruded_mesh(g, 1)
        vs = velocity_space(mesh)
        dt, rho, grav = 0.3, 1.0, 9.82
        S, _ = assemble_normal_penalty(mesh, g, dt, rho, grav, vspace=vs)

        # oracle: 20-point Gauss of (rho g dt/2) omega (phi_a.n)(phi_b.n) ds,
        # parameterized by x with ds = omega dx and independent shape functions
        slope = 0.6 / 0.8
        omega = np.sqrt(1 + slope**2)
        assert omega == pytest.approx(1.25)
        n = np.array([-slope, 1.0]) / omega
        pts, wts = np.polynomial.legendre.leggauss(20)
        xq = 0.4 + 0.4 * pts
        wq = 0.4 * wts
        xi = xq / 0.8
        shapes = np.stack([2 * (xi - 0.5) * (xi - 1.0),
                           2 * xi * (xi - 0.5),
                           -4 * xi * (xi - 1.0)], axis=1)  # left, right, mid
        nodes = vs.surface_facet_nodes[0]
        for a in range(3):
            for ca in range(2):
                for b in range(3):
                    for cb in range(2):
                        val = 0.5 * rho * grav * dt * np.sum(
                            wq * omega * omega * shapes[:, a] * n[ca]
                            * shapes[:, b] * n[cb])
                        got = S[2 * nodes[a] + ca, 2 * nodes[b] + cb]
                        assert got == pytest.approx(val, abs=1e-13 * rho * grav)

    def test_symmetric_positive_semidefinite(self):
        g = SurfaceGrid(np.linspace(-1, 1, 9),
                        0.5 * np.tanh(2 * np.linspace(-1, 1, 9) - 1) + 0.2,
                        np.full(9, -1.0))
        mesh = build_extruded_mesh(g, 4)
        S, _ = assemble_normal_penalty(mesh, g, 1.0, 1.0, 9.82)
        assert np.max(np.abs((S - S.T).data)) < 1e-14 if (S - S.T).nnz else True
        rng = np.random.default_rng(3)
        for _ in range(5):
            x = rng.standard_normal(S.shape[0])
            assert x @ S @ x >= -1e-12 * np.abs(x @ S @ x + 1.0)


class TestFssa:
    def test_dt_zero(self):
        g, mesh = unit_square_mesh(3)
        F, r = assemble_fssa(mesh, g, 0.0, 1.0, 9.82)
        assert F.nnz == 0 or np.max(np.abs(F.data)) == 0.0
        assert np.all(r == 0.0)

    def test_flat_top_unit_vertical_entry(self):
        g, mesh = unit_square_mesh(5)
        vs = velocity_space(mesh)
        dt, rho, grav = 0.7, 1.0, 9.82
        F, _ = assemble_fssa(mesh, g, dt, rho, grav, vspace=vs)
        ez = np.zeros(vs.ndofs)
        ez[1::2] = 1.0
        assert ez @ F @ ez == pytest.approx(rho * grav * dt * 1.0, rel=1e-13)
        # on a flat top, n = zhat and the operator restricted there is symmetric
        d = F - F.T
        assert (np.max(np.abs(d.data)) if d.nnz else 0.0) < 1e-13

    def test_tilted_facet_not_symmetric(self):
        g = SurfaceGrid(np.array([0.0, 0.8]), np.array([1.0, 1.6]), np.zeros(2))
        mesh = build_extruded_mesh(g, 1)
        F, _ = assemble_fssa(mesh, g, 0.5, 1.0, 9.82)
        d = F - F.T
        assert np.max(np.abs(d.data)) > 1e-3

    def test_source_load_reduces_to_vertical_mass(self):
        # (v.zhat) n_z a ds = (v_z, a) dx_perp since omega n_z = 1
        g = SurfaceGrid(np.array([0.0, 0.8]), np.array([1.0, 1.6]), np.zeros(2))
        mesh = build_extruded_mesh(g, 1)
        vs = velocity_space(mesh)
        dt, rho, grav = 0.5, 2.0, 9.82
        _, r = assemble_fssa(mesh, g, dt, rho, grav,
                             a_fn=lambda x, t: np.ones_like(x), t=0.0, vspace=vs)
        ez = np.zeros(vs.ndofs)
        ez[1::2] = 1.0
        assert ez @ r == pytest.approx(rho * grav * dt * 0.8, rel=1e-13)


class TestChangeOfDomainIdentity:
    def test_lemma_free_surface_to_surface_integral(self):
        """(-uperp dx h + uz, w) on the grid equals the facet integral of
        (u.n) w, both at matched quadrature, for random discrete data."""
        rng = np.random.default_rng(11)
        x = np.linspace(-1, 1, 17)
        h = 0.3 * np.sin(2 * x) + 1.0 + 0.05 * rng.standard_normal(x.size)
        g = SurfaceGrid(x, h, np.full_like(x, -1.0))
        mesh = build_extruded_mesh(g, 6)
        vs = velocity_space(mesh)
        u = rng.standard_normal(vs.ndofs)
        w = rng.standard_normal(g.n_nodes)

        # left side via trace samples on the horizontal domain
        nodes = vs.surface_facet_nodes
        uxq = np.einsum("qa,ca->cq", fem.LINE_P2_VALS, u[2 * nodes])
        uzq = np.einsum("qa,ca->cq", fem.LINE_P2_VALS, u[2 * nodes + 1])
        s = g.slopes()
        xq, wq = surface_quad_points(g)
        wvals = np.interp(xq, x, w)
        lhs = np.sum(wq * (-uxq * s[:, None] + uzq) * wvals)

        # right side via facet geometry from mesh vertex coordinates
        rhs = 0.0
        for cell, fi in enumerate(mesh.top_facet_of_cell):
            v0, v1 = mesh.facets[fi]
            p0, p1 = mesh.vertices[v0], mesh.vertices[v1]
            tang = p1 - p0
            length = np.hypot(*tang)
            nrm = np.array([-tang[1], tang[0]]) / length  # outward (z up)
            if nrm[1] < 0:
                nrm = -nrm
            E = fem.LINE_P2_VALS
            un = (u[2 * nodes[cell]] @ E.T) * nrm[0] + (u[2 * nodes[cell] + 1] @ E.T) * nrm[1]
            xs = p0[0] + fem.LINE_QP * tang[0]
            rhs += length * np.sum(fem.LINE_QW * un * np.interp(xs, x, w))
        scale = np.linalg.norm(u) * np.linalg.norm(w)
        assert abs(lhs - rhs) <= 1e-12 * scale


class TestViscosityField:
    def constant_strain_u(self, mesh, scale):
        # u = (c z, c x) with c = scale/sqrt(2): |Du| = scale exactly
        vs = velocity_space(mesh)
        c = scale / np.sqrt(2.0)
        u = np.empty(vs.ndofs)
        u[0::2] = c * vs.node_coords[:, 1]
        u[1::2] = c * vs.node_coords[:, 0]
        return u

    def test_newtonian_ignores_velocity(self):
        _, mesh = unit_square_mesh(3)
        u = self.constant_strain_u(mesh, 7.0)
        mu = viscosity_field(mesh, u, mu0=0.42, p=2.0, delta=0.0)
        assert np.all(mu == 0.42)

    def test_unit_strain_p43(self):
        _, mesh = unit_square_mesh(3)
        u = self.constant_strain_u(mesh, 1.0)
        mu = viscosity_field(mesh, u, mu0=1.0, p=4.0 / 3.0, delta=0.0)
        assert np.allclose(mu, 1.0, rtol=1e-12)

    def test_strain_four_p43(self):
        _, mesh = unit_square_mesh(3)
        u = self.constant_strain_u(mesh, 4.0)
        mu = viscosity_field(mesh, u, mu0=2.0, p=4.0 / 3.0, delta=0.0)
        assert np.allclose(mu, 2.0 * 4.0 ** (-2.0 / 3.0), rtol=1e-12)

    def test_rejects_bad_exponent(self):
        _, mesh = unit_square_mesh(2)
        u = np.zeros(2 * velocity_space(mesh).n_scalar)
        for p in (1.0, 0.5, 2.5):
            with pytest.raises(ValueError):
                viscosity_field(mesh, u, 1.0, p)


class TestVelocityBcs:
    def solve_constrained(self, mesh, g):
        vs = velocity_space(mesh)
        from freestokes import linalg
        A, B = assemble_stokes(mesh, np.ones((mesh.n_triangles, TRI_QW.size)), vs)
        f = assemble_gravity(mesh, 1.0, 9.82, vspace=vs)
        A2, B2, f2, constrained = apply_velocity_bcs(A, B, f, vs)
        u, pi = linalg.solve_saddle(linalg.SaddleSystem(A2, B2, f2))
        return vs, u, pi, constrained, (A, B, f)

    def test_bottom_and_lateral_dofs_zero(self):
        g = SurfaceGrid(np.linspace(-1, 1, 9),
                        0.5 * np.tanh(2 * np.linspace(-1, 1, 9) - 1) + 0.2,
                        np.full(9, -1.0))
        mesh = build_extruded_mesh(g, 4)
        vs, u, pi, constrained, _ = self.solve_constrained(mesh, g)
        bottom = vs.nodes_by_marker[BOTTOM]
        lateral = vs.nodes_by_marker[LATERAL]
        assert np.all(u[2 * bottom] == 0.0)
        assert np.all(u[2 * bottom + 1] == 0.0)
        assert np.all(u[2 * lateral] == 0.0)

    def test_elimination_equals_reduced_system(self):
        g, mesh = unit_square_mesh(3)
        gt = SurfaceGrid(g.x, 1.0 + 0.2 * np.sin(3 * g.x), g.b)
        mesh = build_extruded_mesh(gt, 3)
        vs, u, pi, constrained, (A, B, f) = self.solve_constrained(mesh, gt)
        # oracle: build the reduced system on free dofs explicitly and solve
        free = np.setdiff1d(np.arange(vs.ndofs), constrained)
        Af = A.toarray()[np.ix_(free, free)]
        Bf = B.toarray()[:, free]
        K = np.block([[Af, Bf.T], [Bf, np.zeros((B.shape[0],) * 2)]])
        rhs = np.concatenate([f[free], np.zeros(B.shape[0])])
        sol = np.linalg.solve(K, rhs)
        scale = max(1.0, np.abs(sol).max())
        assert np.max(np.abs(u[free] - sol[:free.size])) <= 1e-12 * scale
        assert np.max(np.abs(pi - (-sol[free.size:]))) <= 1e-12 * scale


class _ZeroTrace:
    def __init__(self, grid):
        self.uperp = np.zeros((grid.n_cells, LINE_QP.size))
        self.uz = np.zeros((grid.n_cells, LINE_QP.size))
        self.node_speed = np.zeros(grid.n_nodes)


class TestFreeSurfaceAssembly:
    def grid(self, n=16):
        x = np.linspace(-1, 1, n + 1)
        return SurfaceGrid(x, 0.2 + 0.1 * np.sin(2 * x), np.full_like(x, -1.0))

    def test_rest_state(self):
        from freestokes import linalg
        g = self.grid()
        tr = _ZeroTrace(g)
        sysm, rhs = assemble_free_surface(g, tr, 0.25, "explicit",
                                          np.zeros(g.n_nodes - 2))
        h1 = linalg.factor_solve(sysm, rhs)
        assert np.max(np.abs(h1 - g.h)) < 1e-13

    def test_constant_source(self):
        from freestokes import linalg
        g = self.grid()
        tr = _ZeroTrace(g)
        c, dt = 0.37, 0.5
        sysm, rhs = assemble_free_surface(g, tr, dt, "explicit",
                                          np.zeros(g.n_nodes - 2),
                                          a_fn=lambda x, t: np.full_like(x, c))
        h1 = linalg.factor_solve(sysm, rhs)
        assert np.max(np.abs(h1 - (g.h + dt * c))) < 1e-13

    def test_uniform_advection_of_linear_height_is_exact(self):
        from freestokes import linalg
        x = np.linspace(0, 2, 21)
        slope = 0.3
        g = SurfaceGrid(x, 1.0 + slope * x, np.zeros_like(x))
        U = 0.8
        tr = _ZeroTrace(g)
        tr.uperp[:] = U
        dt = 0.05
        sysm, rhs = assemble_free_surface(g, tr, dt, "explicit",
                                          np.zeros(g.n_nodes - 2))
        h1 = linalg.factor_solve(sysm, rhs)
        # dh/dt = -U dh/dx keeps a linear profile linear: exact translation
        assert np.max(np.abs(h1 - (g.h - dt * U * slope))) < 1e-12

    def test_semi_implicit_advection_against_direct_solve(self):
        from freestokes import linalg
        g = self.grid(10)
        tr = _ZeroTrace(g)
        rng = np.random.default_rng(5)
        tr.uperp[:] = 0.5 + 0.1 * rng.random(tr.uperp.shape)
        dt = 0.2
        sysm, rhs = assemble_free_surface(g, tr, dt, "semi-implicit",
                                          np.zeros(g.n_nodes - 2))
        h1 = linalg.factor_solve(sysm, rhs)
        # residual form: M(h1 - h0) + dt*C h1 = 0 with (uz, w) = 0
        M = fem.surface_mass_matrix(g)
        C = fem._advection_matrix(g, tr.uperp)
        res = M @ (h1 - g.h) + dt * (C @ h1)
        assert np.max(np.abs(res)) < 1e-13

    def test_mode_validation(self):
        g = self.grid(6)
        with pytest.raises(ValueError):
            assemble_free_surface(g, _ZeroTrace(g), 0.1, "bogus",
                                  np.zeros(g.n_nodes - 2))
        small = self.grid(5)
        with pytest.raises(AssemblyError):
            assemble_free_surface(g, _ZeroTrace(small), 0.1, "explicit",
                                  np.zeros(g.n_nodes - 2))


class TestEdgeJump:
    def test_annihilates_linear(self):
        x = np.linspace(0, 1, 12)
        g = SurfaceGrid(x, 2.0 + 0.7 * x, np.zeros_like(x))
        J = edge_jump_matrix(g, np.ones(g.n_nodes - 2))
        assert np.max(np.abs(J @ g.h)) < 1e-12

    def test_symmetric_psd(self):
        g = SurfaceGrid(np.sort(np.random.default_rng(2).uniform(0, 1, 10)),
                        np.ones(10), np.zeros(10))
        gamma = np.random.default_rng(3).random(8)
        J = edge_jump_matrix(g, gamma)
        assert np.max(np.abs((J - J.T).toarray())) < 1e-14
        w = np.linalg.eigvalsh(J.toarray())
        assert w.min() > -1e-10 * max(w.max(), 1.0)

    def test_rejects_negative_gamma(self):
        g = SurfaceGrid(np.linspace(0, 1, 5), np.ones(5), np.zeros(5))
        with pytest.raises(AssemblyError):
            edge_jump_matrix(g, np.array([0.1, -0.2, 0.3]))
