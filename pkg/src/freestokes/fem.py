"""Finite element spaces, quadrature, and assembly.

Taylor-Hood pair on triangles (vector quadratic velocity, linear pressure)
plus a linear space on the 1D surface grid. The volume rule integrates
degree-4 polynomials exactly; surface integrals use a 3-point Gauss rule per
top facet, parameterized by the horizontal coordinate so that the same
quadrature points serve both the surface-grid integrals and the facet
integrals (this makes the change-of-domain identity exact discretely).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from freestokes.mesh import BOTTOM, LATERAL, SURFACE, SurfaceGrid, VolumeMesh


class AssemblyError(Exception):
    pass


# degree-4 rule on the reference triangle (0,0)-(1,0)-(0,1), 6 points
_A1, _W1 = 0.445948490915965, 0.223381589678011
_A2, _W2 = 0.091576213509771, 0.109951743655322
TRI_QP = np.array([
    [1.0 - 2.0 * _A1, _A1, _A1],
    [_A1, 1.0 - 2.0 * _A1, _A1],
    [_A1, _A1, 1.0 - 2.0 * _A1],
    [1.0 - 2.0 * _A2, _A2, _A2],
    [_A2, 1.0 - 2.0 * _A2, _A2],
    [_A2, _A2, 1.0 - 2.0 * _A2],
])  # barycentric (l0, l1, l2)
TRI_QW = 0.5 * np.array([_W1, _W1, _W1, _W2, _W2, _W2])

# 3-point Gauss on [0, 1]
_G = 0.5 * np.sqrt(3.0 / 5.0)
LINE_QP = np.array([0.5 - _G, 0.5, 0.5 + _G])
LINE_QW = np.array([5.0, 8.0, 5.0]) / 18.0


def _p2_reference():
    lam = TRI_QP
    l0, l1, l2 = lam[:, 0], lam[:, 1], lam[:, 2]
    vals = np.stack([
        l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
        4 * l1 * l2, 4 * l0 * l2, 4 * l0 * l1,
    ], axis=1)  # (nq, 6)
    # gradients w.r.t. (xi, eta); l0 = 1-xi-eta, l1 = xi, l2 = eta
    dl = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])  # (3, 2)
    grads = np.empty((lam.shape[0], 6, 2))
    for q in range(lam.shape[0]):
        g = np.empty((6, 2))
        g[0] = (4 * l0[q] - 1) * dl[0]
        g[1] = (4 * l1[q] - 1) * dl[1]
        g[2] = (4 * l2[q] - 1) * dl[2]
        g[3] = 4 * (l1[q] * dl[2] + l2[q] * dl[1])
        g[4] = 4 * (l0[q] * dl[2] + l2[q] * dl[0])
        g[5] = 4 * (l0[q] * dl[1] + l1[q] * dl[0])
        grads[q] = g
    return vals, grads


P2_VALS, P2_GRADS = _p2_reference()  # (nq,6), (nq,6,2)
P1_VALS = TRI_QP.copy()              # (nq,3)
P1_GRADS = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])  # (3,2) in (xi,eta)

# 1D quadratic shapes on a facet, nodes ordered (left, right, midpoint)
def line_p2_values(xi: np.ndarray) -> np.ndarray:
    return np.stack([(1 - xi) * (1 - 2 * xi), xi * (2 * xi - 1), 4 * xi * (1 - xi)],
                    axis=-1)


LINE_P2_VALS = line_p2_values(LINE_QP)  # (nq1, 3)


@dataclass(frozen=True)
class VelocitySpace:
    """Vector P2 space; scalar node k owns dofs (2k, 2k+1) = (x, z)."""

    kind = "velocity-P2-vector"
    mesh: VolumeMesh
    cell_nodes: np.ndarray        # (nt, 6) scalar node ids [v0,v1,v2,m12,m02,m01]
    node_coords: np.ndarray       # (n_scalar, 2)
    nodes_by_marker: dict         # marker -> sorted scalar node ids
    surface_facet_nodes: np.ndarray  # (nx, 3) [left vertex, right vertex, midpoint]
    edge_verts: np.ndarray        # (ne, 2) endpoint vertices of each edge node

    @property
    def n_scalar(self) -> int:
        return self.node_coords.shape[0]

    @property
    def ndofs(self) -> int:
        return 2 * self.n_scalar

    def constrained_dofs(self) -> np.ndarray:
        """Bottom dofs (both components) and lateral x-components."""
        bottom = self.nodes_by_marker[BOTTOM]
        lateral = self.nodes_by_marker[LATERAL]
        dofs = np.concatenate([2 * bottom, 2 * bottom + 1, 2 * lateral])
        return np.unique(dofs)


@dataclass(frozen=True)
class PressureSpace:
    kind = "pressure-P1"
    mesh: VolumeMesh
    cell_nodes: np.ndarray  # (nt, 3) = triangles

    @property
    def ndofs(self) -> int:
        return self.mesh.n_vertices


@dataclass(frozen=True)
class SurfaceSpace:
    kind = "surface-P1"
    grid: SurfaceGrid

    @property
    def ndofs(self) -> int:
        return self.grid.n_nodes


def _edge_table(mesh: VolumeMesh):
    """Unique edges and per-cell edge ids in basis order [m12, m02, m01]."""
    tri = mesh.triangles
    pairs = np.concatenate([tri[:, [1, 2]], tri[:, [0, 2]], tri[:, [0, 1]]])
    pairs = np.sort(pairs, axis=1)
    keys = pairs[:, 0] * mesh.n_vertices + pairs[:, 1]
    uniq, inv = np.unique(keys, return_inverse=True)
    cell_edges = inv.reshape(3, -1).T  # (nt, 3)
    edge_verts = np.column_stack([uniq // mesh.n_vertices, uniq % mesh.n_vertices])
    return uniq, cell_edges, edge_verts


def velocity_space(mesh: VolumeMesh) -> VelocitySpace:
    edge_keys, cell_edges, edge_verts = _edge_table(mesh)
    nv = mesh.n_vertices
    cell_nodes = np.concatenate([mesh.triangles, nv + cell_edges], axis=1)
    mid_coords = 0.5 * (mesh.vertices[edge_verts[:, 0]] + mesh.vertices[edge_verts[:, 1]])
    node_coords = np.vstack([mesh.vertices, mid_coords])

    def facet_mid_node(f):
        a, b = sorted(f)
        k = np.searchsorted(edge_keys, a * nv + b)
        return nv + k

    nodes_by_marker = {}
    for marker in (SURFACE, BOTTOM, LATERAL):
        sel = mesh.facet_markers == marker
        nodes = set()
        for f in mesh.facets[sel]:
            nodes.add(int(f[0]))
            nodes.add(int(f[1]))
            nodes.add(int(facet_mid_node(f)))
        nodes_by_marker[marker] = np.array(sorted(nodes), dtype=np.int64)

    sfn = np.empty((mesh.nx, 3), dtype=np.int64)
    for cell, fi in enumerate(mesh.top_facet_of_cell):
        v0, v1 = mesh.facets[fi]
        sfn[cell] = (v0, v1, facet_mid_node((v0, v1)))
    return VelocitySpace(mesh, cell_nodes, node_coords, nodes_by_marker, sfn,
                         edge_verts)


def refresh_velocity_space(space: VelocitySpace, mesh: VolumeMesh) -> VelocitySpace:
    """Rebind a space to a vertically remapped mesh (same connectivity).

    Only node coordinates change: edge midpoints are recomputed from the
    moved vertices, all dof topology is reused.
    """
    mid = 0.5 * (mesh.vertices[space.edge_verts[:, 0]]
                 + mesh.vertices[space.edge_verts[:, 1]])
    node_coords = np.vstack([mesh.vertices, mid])
    return VelocitySpace(mesh, space.cell_nodes, node_coords,
                         space.nodes_by_marker, space.surface_facet_nodes,
                         space.edge_verts)


def pressure_space(mesh: VolumeMesh) -> PressureSpace:
    return PressureSpace(mesh, mesh.triangles)


def surface_space(grid: SurfaceGrid) -> SurfaceSpace:
    return SurfaceSpace(grid)


def _geometry(mesh: VolumeMesh):
    """Per-cell Jacobian data: inverse-transpose and w_q*|J| weights."""
    p = mesh.vertices[mesh.triangles]  # (nt, 3, 2)
    a = p[:, 1, 0] - p[:, 0, 0]
    b = p[:, 2, 0] - p[:, 0, 0]
    c = p[:, 1, 1] - p[:, 0, 1]
    d = p[:, 2, 1] - p[:, 0, 1]
    det = a * d - b * c
    invjt = np.empty((mesh.n_triangles, 2, 2))
    invjt[:, 0, 0] = d / det
    invjt[:, 0, 1] = -c / det
    invjt[:, 1, 0] = -b / det
    invjt[:, 1, 1] = a / det
    wdet = TRI_QW[None, :] * det[:, None]  # (nt, nq)
    return invjt, wdet


def p2_physical_gradients(mesh: VolumeMesh):
    """Gradients of the six scalar P2 basis functions at quadrature points.

    Returns (gx, gz, wdet): each (nt, nq, 6) / (nt, nq).
    """
    invjt, wdet = _geometry(mesh)
    g = np.einsum("cab,qib->cqia", invjt, P2_GRADS)  # (nt, nq, 6, 2)
    return g[..., 0], g[..., 1], wdet


def cell_quad_points(mesh: VolumeMesh) -> np.ndarray:
    """Physical coordinates of the volume quadrature points, (nt, nq, 2)."""
    p = mesh.vertices[mesh.triangles]
    return np.einsum("qk,cki->cqi", TRI_QP, p)


def assemble_stokes(mesh: VolumeMesh, mu_q: np.ndarray,
                    vspace: VelocitySpace | None = None,
                    pspace: PressureSpace | None = None):
    """Viscous operator A and divergence operator B of the weak Stokes form.

    A_ij = sum_K sum_q w 2 mu (D phi_j : D phi_i), B_kj = sum w q_k div(phi_j).
    """
    vspace = vspace or velocity_space(mesh)
    pspace = pspace or pressure_space(mesh)
    mu_q = np.asarray(mu_q, dtype=float)
    if mu_q.shape != (mesh.n_triangles, TRI_QW.size):
        raise AssemblyError(f"mu samples must have shape (nt, {TRI_QW.size})")
    if np.any(mu_q < 0.0):
        raise AssemblyError("negative viscosity sample")

    gx, gz, wdet = p2_physical_gradients(mesh)
    c2 = 2.0 * mu_q * wdet  # (nt,nq)
    kxx = np.einsum("cq,cqi,cqj->cij", c2, gx, gx) \
        + 0.5 * np.einsum("cq,cqi,cqj->cij", c2, gz, gz)
    kzz = np.einsum("cq,cqi,cqj->cij", c2, gz, gz) \
        + 0.5 * np.einsum("cq,cqi,cqj->cij", c2, gx, gx)
    kxz = np.einsum("cq,cqi,cqj->cij", mu_q * wdet, gz, gx)

    nodes = vspace.cell_nodes  # (nt, 6)
    rx = 2 * nodes
    rz = rx + 1
    nu = vspace.ndofs

    def scatter(local, rows, cols):
        r = np.repeat(rows[:, :, None], 6, axis=2).ravel()
        c = np.repeat(cols[:, None, :], 6, axis=1).ravel()
        return r, c, local.ravel()

    rows, cols, vals = [], [], []
    for local, rr, cc in ((kxx, rx, rx), (kzz, rz, rz), (kxz, rx, rz),
                          (np.swapaxes(kxz, 1, 2), rz, rx)):
        r, c, v = scatter(local, rr, cc)
        rows.append(r)
        cols.append(c)
        vals.append(v)
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(nu, nu)).tocsr()

    lam_w = np.einsum("cq,qk->cqk", wdet, P1_VALS)  # (nt, nq, 3)
    bx = np.einsum("cqk,cqj->ckj", lam_w, gx)
    bz = np.einsum("cqk,cqj->ckj", lam_w, gz)
    prow = np.repeat(pspace.cell_nodes[:, :, None], 6, axis=2).ravel()
    B = sp.coo_matrix((
        np.concatenate([bx.ravel(), bz.ravel()]),
        (np.concatenate([prow, prow]),
         np.concatenate([np.repeat(rx[:, None, :], 3, axis=1).ravel(),
                         np.repeat(rz[:, None, :], 3, axis=1).ravel()])),
    ), shape=(pspace.ndofs, nu)).tocsr()
    return A, B


def assemble_gravity(mesh: VolumeMesh, rho: float, g: float,
                     vspace: VelocitySpace | None = None) -> np.ndarray:
    """Load f_i = -rho g (zhat, phi_i); only vertical dofs are nonzero."""
    if rho < 0 or g < 0:
        raise AssemblyError("rho and g must be nonnegative")
    vspace = vspace or velocity_space(mesh)
    _, wdet = _geometry(mesh)
    local = -rho * g * np.einsum("cq,qi->ci", wdet, P2_VALS)  # (nt, 6)
    f = np.zeros(vspace.ndofs)
    np.add.at(f, 2 * vspace.cell_nodes + 1, local)
    return f


def assemble_load(mesh: VolumeMesh, force_fn,
                  vspace: VelocitySpace | None = None) -> np.ndarray:
    """General body-force load (f, v); force_fn(x, z) -> (fx, fz) arrays."""
    vspace = vspace or velocity_space(mesh)
    _, wdet = _geometry(mesh)
    pts = cell_quad_points(mesh)
    fx, fz = force_fn(pts[..., 0], pts[..., 1])
    f = np.zeros(vspace.ndofs)
    np.add.at(f, 2 * vspace.cell_nodes, np.einsum("cq,qi->ci", wdet * fx, P2_VALS))
    np.add.at(f, 2 * vspace.cell_nodes + 1, np.einsum("cq,qi->ci", wdet * fz, P2_VALS))
    return f


def surface_quad_points(grid: SurfaceGrid):
    """Surface quadrature: x points (nc, nq1) and weights w*dx (nc, nq1)."""
    x0 = grid.x[:-1]
    dx = grid.cell_sizes
    xq = x0[:, None] + dx[:, None] * LINE_QP[None, :]
    wq = dx[:, None] * LINE_QW[None, :]
    return xq, wq


def _surface_normal_scaled(grid: SurfaceGrid) -> np.ndarray:
    """m = omega*n = (-dh/dx, 1) per surface cell; ds = omega dx."""
    s = grid.slopes()
    return np.column_stack([-s, np.ones_like(s)])


def _facet_dof_scatter(space: VelocitySpace, local):
    """Scatter (nc, 6, 6) facet-local blocks; dof order [lx,lz,rx,rz,mx,mz]."""
    nodes = space.surface_facet_nodes  # (nc, 3)
    dofs = np.empty((nodes.shape[0], 6), dtype=np.int64)
    dofs[:, 0::2] = 2 * nodes
    dofs[:, 1::2] = 2 * nodes + 1
    r = np.repeat(dofs[:, :, None], 6, axis=2).ravel()
    c = np.repeat(dofs[:, None, :], 6, axis=1).ravel()
    return r, c, local.ravel(), dofs


def assemble_normal_penalty(mesh: VolumeMesh, grid: SurfaceGrid, dt: float,
                            rho: float, g: float, a_fn=None, t: float = 0.0,
                            vspace: VelocitySpace | None = None):
    """Symmetric surface term (rho g dt/2) int_Gs omega (u.n)(v.n) ds and the
    source load rho g dt int_Gs (v.n) a ds.

    Both are computed on the horizontal domain via ds = omega dx, using
    omega n = (-dh/dx, 1).
    """
    if dt < 0:
        raise AssemblyError("dt must be >= 0")
    vspace = vspace or velocity_space(mesh)
    nu = vspace.ndofs
    m = _surface_normal_scaled(grid)  # (nc, 2)
    xq, wq = surface_quad_points(grid)
    E = LINE_P2_VALS  # (nq1, 3)

    # (v.m) coefficient of facet dof (a, comp) at qp: E_a(q) * m_comp
    # local S = (rho g dt / 2) sum_q w (u.m)(v.m)
    phi = np.einsum("qa,ck->cqak", E, m)  # (nc, nq1, 3, 2): basis dot m
    phi = phi.reshape(m.shape[0], E.shape[0], 6)
    local = 0.5 * rho * g * dt * np.einsum("cq,cqa,cqb->cab", wq, phi, phi)
    r, c, v, dofs = _facet_dof_scatter(vspace, local)
    S = sp.coo_matrix((v, (r, c)), shape=(nu, nu)).tocsr()

    load = np.zeros(nu)
    if a_fn is not None and dt > 0:
        aq = a_fn(xq, t)
        lv = rho * g * dt * np.einsum("cq,cqa->ca", wq * aq, phi)
        np.add.at(load, dofs, lv)
    return S, load


def assemble_fssa(mesh: VolumeMesh, grid: SurfaceGrid, dt: float,
                  rho: float, g: float, a_fn=None, t: float = 0.0,
                  vspace: VelocitySpace | None = None):
    """FSSA surface term rho g dt int_Gs (u.n)(zhat.v) ds (non-symmetric) and
    source load rho g dt int_Gs (v.zhat) n_z a ds = rho g dt (v_z, a) dx."""
    if dt < 0:
        raise AssemblyError("dt must be >= 0")
    vspace = vspace or velocity_space(mesh)
    nu = vspace.ndofs
    m = _surface_normal_scaled(grid)
    xq, wq = surface_quad_points(grid)
    E = LINE_P2_VALS

    phi_un = np.einsum("qa,ck->cqak", E, m).reshape(m.shape[0], E.shape[0], 6)
    phi_vz = np.zeros_like(phi_un)  # v_z at qp: only z components
    phi_vz[:, :, 1::2] = np.broadcast_to(E[None, :, :], (m.shape[0], E.shape[0], 3))
    local = rho * g * dt * np.einsum("cq,cqa,cqb->cab", wq, phi_vz, phi_un)
    r, c, v, dofs = _facet_dof_scatter(vspace, local)
    F = sp.coo_matrix((v, (r, c)), shape=(nu, nu)).tocsr()

    load = np.zeros(nu)
    if a_fn is not None and dt > 0:
        aq = a_fn(xq, t)
        lv = rho * g * dt * np.einsum("cq,cqa->ca", wq * aq, phi_vz)
        np.add.at(load, dofs, lv)
    return F, load


def viscosity_field(mesh: VolumeMesh, u: np.ndarray, mu0: float, p: float,
                    delta: float = 0.0,
                    vspace: VelocitySpace | None = None) -> np.ndarray:
    """Power-law samples mu0 (|Du|^2 + delta^2)^((p-2)/2) at quadrature points."""
    if not 1.0 < p <= 2.0:
        raise ValueError(f"power-law exponent p={p} outside (1, 2]")
    if mu0 <= 0:
        raise ValueError("mu0 must be positive")
    if p == 2.0:
        return np.full((mesh.n_triangles, TRI_QW.size), mu0)
    du_sq = strain_rate_sq(mesh, u, vspace=vspace)
    return mu0 * (du_sq + delta * delta) ** (0.5 * (p - 2.0))


def strain_rate_sq(mesh: VolumeMesh, u: np.ndarray,
                   vspace: VelocitySpace | None = None) -> np.ndarray:
    """|Du|^2 (Frobenius norm squared of the symmetric gradient) at qp."""
    vspace = vspace or velocity_space(mesh)
    gx, gz, _ = p2_physical_gradients(mesh)
    ux = u[2 * vspace.cell_nodes]      # (nt, 6)
    uz = u[2 * vspace.cell_nodes + 1]
    dux_dx = np.einsum("cqi,ci->cq", gx, ux)
    dux_dz = np.einsum("cqi,ci->cq", gz, ux)
    duz_dx = np.einsum("cqi,ci->cq", gx, uz)
    duz_dz = np.einsum("cqi,ci->cq", gz, uz)
    dxz = 0.5 * (dux_dz + duz_dx)
    return dux_dx**2 + duz_dz**2 + 2.0 * dxz**2


def integrate_cell_samples(mesh: VolumeMesh, samples: np.ndarray) -> float:
    """Integrate per-quadrature-point samples over the domain."""
    _, wdet = _geometry(mesh)
    return float(np.sum(wdet * samples))


def integrate_dot_z(mesh: VolumeMesh, u: np.ndarray,
                    vspace: VelocitySpace | None = None) -> float:
    """(zhat, u) over the domain."""
    vspace = vspace or velocity_space(mesh)
    _, wdet = _geometry(mesh)
    uz = u[2 * vspace.cell_nodes + 1]
    return float(np.sum(wdet * np.einsum("qi,ci->cq", P2_VALS, uz)))


def apply_velocity_bcs(A: sp.csr_matrix, B: sp.csr_matrix, f: np.ndarray,
                       vspace: VelocitySpace):
    """Eliminate bottom (both components) and lateral (x component) dofs.

    Rows/columns of A are zeroed with a unit diagonal (symmetric treatment),
    the matching columns of B are zeroed, and the load entries cleared. The
    traction-free surface needs no action.
    """
    constrained = vspace.constrained_dofs()
    nu = vspace.ndofs
    mask = np.zeros(nu, dtype=bool)
    mask[constrained] = True

    Ac = A.tocoo()
    keep = ~(mask[Ac.row] | mask[Ac.col])
    rows = np.concatenate([Ac.row[keep], constrained])
    cols = np.concatenate([Ac.col[keep], constrained])
    vals = np.concatenate([Ac.data[keep], np.ones(constrained.size)])
    A2 = sp.coo_matrix((vals, (rows, cols)), shape=A.shape).tocsr()

    Bc = B.tocoo()
    keepb = ~mask[Bc.col]
    B2 = sp.coo_matrix((Bc.data[keepb], (Bc.row[keepb], Bc.col[keepb])),
                       shape=B.shape).tocsr()
    f2 = f.copy()
    f2[constrained] = 0.0
    return A2, B2, f2, constrained


# ---------------------------------------------------------------------------
# surface (1D) assembly


def surface_mass_matrix(grid: SurfaceGrid) -> sp.csr_matrix:
    """Exact P1 mass matrix on the surface grid."""
    dx = grid.cell_sizes
    n = grid.n_nodes
    main = np.zeros(n)
    main[:-1] += dx / 3.0
    main[1:] += dx / 3.0
    off = dx / 6.0
    return sp.diags([off, main, off], [-1, 0, 1], format="csr")


def surface_l2_sq(grid: SurfaceGrid, coeffs: np.ndarray) -> float:
    """Exact squared L2 norm of a P1 function on the surface grid."""
    M = surface_mass_matrix(grid)
    return float(coeffs @ (M @ coeffs))


def edge_jump_matrix(grid: SurfaceGrid, gamma: np.ndarray) -> sp.csr_matrix:
    """Jump-penalty operator: sum over interior nodes of gamma*[[dh]]*[[dw]].

    gamma has one entry per interior node; the jump at node m is the slope
    difference between the right and left cell.
    """
    n = grid.n_nodes
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (n - 2,):
        raise AssemblyError("gamma must have one entry per interior node")
    if np.any(gamma < 0):
        raise AssemblyError("gamma must be nonnegative")
    dx = grid.cell_sizes
    rows, cols, vals = [], [], []
    for m in range(1, n - 1):
        gl = np.array([1.0 / dx[m - 1], -1.0 / dx[m - 1] - 1.0 / dx[m], 1.0 / dx[m]])
        idx = np.array([m - 1, m, m + 1])
        blk = gamma[m - 1] * np.outer(gl, gl)
        rows.append(np.repeat(idx, 3))
        cols.append(np.tile(idx, 3))
        vals.append(blk.ravel())
    if not rows:
        return sp.csr_matrix((n, n))
    return sp.coo_matrix((np.concatenate(vals),
                          (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n, n)).tocsr()


def _p1_load(grid: SurfaceGrid, samples: np.ndarray) -> np.ndarray:
    """(f, w_i) from per-cell quadrature samples of f, (nc, nq1)."""
    _, wq = surface_quad_points(grid)
    left = np.sum(wq * samples * (1.0 - LINE_QP)[None, :], axis=1)
    right = np.sum(wq * samples * LINE_QP[None, :], axis=1)
    out = np.zeros(grid.n_nodes)
    out[:-1] += left
    out[1:] += right
    return out


def surface_source_load(grid: SurfaceGrid, a_fn, t: float) -> np.ndarray:
    """(a(.,t), w_i) with a evaluated analytically at quadrature points."""
    if a_fn is None:
        return np.zeros(grid.n_nodes)
    xq, _ = surface_quad_points(grid)
    return _p1_load(grid, a_fn(xq, t))


def _advection_matrix(grid: SurfaceGrid, uperp_q: np.ndarray) -> sp.csr_matrix:
    """C_ij = (uperp d_x w_j, w_i): trial slope constant per cell."""
    _, wq = surface_quad_points(grid)
    dx = grid.cell_sizes
    n = grid.n_nodes
    wl = np.sum(wq * uperp_q * (1.0 - LINE_QP)[None, :], axis=1)  # test = left
    wr = np.sum(wq * uperp_q * LINE_QP[None, :], axis=1)
    rows = np.concatenate([np.arange(n - 1), np.arange(n - 1),
                           np.arange(1, n), np.arange(1, n)])
    cols = np.concatenate([np.arange(n - 1), np.arange(1, n),
                           np.arange(n - 1), np.arange(1, n)])
    vals = np.concatenate([-wl / dx, wl / dx, -wr / dx, wr / dx])
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def kinematic_samples(grid: SurfaceGrid, trace) -> np.ndarray:
    """(-uperp dh/dx + uz) at surface quadrature points, (nc, nq1)."""
    s = grid.slopes()
    return -trace.uperp * s[:, None] + trace.uz


def assemble_free_surface(grid: SurfaceGrid, trace, dt: float, mode: str,
                          gamma: np.ndarray, a_fn=None, t: float = 0.0):
    """System and right side of one height update.

    explicit:       (M + dt J) h1 = M h0 + dt [(-uperp dx h0 + uz, w) + (a, w)]
    semi-implicit:  (M + dt C(uperp) + dt J) h1 = M h0 + dt [(uz, w) + (a, w)]
    implicit:       same shape as semi-implicit; the caller supplies the trace
                    and source evaluated at the new time level.
    """
    if mode not in ("explicit", "semi-implicit", "implicit"):
        raise ValueError(f"unknown mode {mode!r}")
    if trace.uperp.shape != (grid.n_cells, LINE_QP.size):
        raise AssemblyError("trace sampled on a different grid")
    M = surface_mass_matrix(grid)
    J = edge_jump_matrix(grid, gamma)
    src = surface_source_load(grid, a_fn, t)
    if mode == "explicit":
        system = (M + dt * J).tocsr()
        rhs = M @ grid.h + dt * (_p1_load(grid, kinematic_samples(grid, trace)) + src)
    else:
        C = _advection_matrix(grid, trace.uperp)
        system = (M + dt * C + dt * J).tocsr()
        rhs = M @ grid.h + dt * (_p1_load(grid, trace.uz) + src)
    return system, rhs
