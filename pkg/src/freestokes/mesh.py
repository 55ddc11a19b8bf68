"""Surface grid on the flat horizontal domain and the extruded 2D volume mesh.

The fluid domain is the region between the bedrock b(x) and the surface
height h(x), both piecewise linear on a fixed 1D grid. The volume mesh is a
structured extrusion of that grid: every column of quads is split into two
triangles along the lower-left/upper-right diagonal, and each top facet lies
exactly above one surface cell (the column map), which makes the
change-of-domain identities between the surface grid and the top boundary
exact at the discrete level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SURFACE = 1
BOTTOM = 2
LATERAL = 3

MARKER_NAMES = {SURFACE: "surface", BOTTOM: "bottom", LATERAL: "lateral"}


class GeometryError(Exception):
    """Invalid geometry: non-positive thickness, bad orientation, ..."""


@dataclass(frozen=True)
class SurfaceGrid:
    """1D mesh of the horizontal domain carrying height and bedrock.

    x, h, b are nodal arrays of equal length; cells are consecutive node
    pairs; thickness h - b must be positive at every node.
    """

    x: np.ndarray
    h: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=float)
        h = np.ascontiguousarray(self.h, dtype=float)
        b = np.ascontiguousarray(self.b, dtype=float)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "b", b)
        if not (x.ndim == 1 and x.shape == h.shape == b.shape and x.size >= 2):
            raise GeometryError("grid arrays must be equal-length 1D with >= 2 nodes")
        if not np.all(np.diff(x) > 0.0):
            raise GeometryError("grid nodes must be strictly increasing")
        thickness = h - b
        bad = np.flatnonzero(thickness <= 0.0)
        if bad.size:
            i = int(bad[0])
            raise GeometryError(
                f"non-positive thickness h-b={thickness[i]:.6g} at node {i} (x={x[i]:.6g})"
            )

    @property
    def n_cells(self) -> int:
        return self.x.size - 1

    @property
    def n_nodes(self) -> int:
        return self.x.size

    @property
    def cell_sizes(self) -> np.ndarray:
        """Per-cell diameter (node distance)."""
        return np.diff(self.x)

    @property
    def thickness(self) -> np.ndarray:
        return self.h - self.b

    def with_height(self, h_new: np.ndarray) -> "SurfaceGrid":
        """New grid with the same nodes and bedrock but updated height."""
        return SurfaceGrid(self.x, np.asarray(h_new, dtype=float), self.b)

    def slopes(self) -> np.ndarray:
        """Per-cell slope of the piecewise-linear height."""
        return np.diff(self.h) / np.diff(self.x)


@dataclass(frozen=True)
class VolumeMesh:
    """Extruded triangulation of the fluid domain.

    vertices[(ny+1)*i + j] is layer j of column i. boundary facets are
    (v0, v1) vertex pairs with one marker each; top_facet_of_cell maps each
    surface cell to the index (into facets) of the top facet above it.
    """

    vertices: np.ndarray       # (nv, 2) float
    triangles: np.ndarray      # (nt, 3) int, positively oriented
    facets: np.ndarray         # (nf, 2) int
    facet_markers: np.ndarray  # (nf,) int in {SURFACE, BOTTOM, LATERAL}
    top_facet_of_cell: np.ndarray  # (nx,) int
    nx: int
    ny: int

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def vertex_index(self, i: int, j: int) -> int:
        return i * (self.ny + 1) + j


def build_extruded_mesh(grid: SurfaceGrid, ny: int) -> VolumeMesh:
    """Extrude the surface grid into ny layers of triangle pairs.

    Layer vertices are linearly spaced between b and h in each column; quads
    are split along the lower-left to upper-right diagonal; boundary facets
    get surface/bottom/lateral markers.
    """
    if ny < 1:
        raise ValueError("ny must be >= 1")
    nx = grid.n_cells
    s = np.arange(ny + 1) / ny
    # vertices: column-major, (nx+1) columns of (ny+1) layers
    xs = np.repeat(grid.x, ny + 1)
    zs = (grid.b[:, None] + s[None, :] * grid.thickness[:, None]).ravel()
    vertices = np.column_stack([xs, zs])

    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    i = i.ravel()
    j = j.ravel()
    v00 = i * (ny + 1) + j
    v10 = (i + 1) * (ny + 1) + j
    v01 = v00 + 1
    v11 = v10 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    cols = np.arange(nx)
    top = np.column_stack([cols * (ny + 1) + ny, (cols + 1) * (ny + 1) + ny])
    bot = np.column_stack([cols * (ny + 1), (cols + 1) * (ny + 1)])
    layers = np.arange(ny)
    left = np.column_stack([layers, layers + 1])
    right = nx * (ny + 1) + left
    facets = np.vstack([top, bot, left, right])
    markers = np.concatenate([
        np.full(nx, SURFACE),
        np.full(nx, BOTTOM),
        np.full(2 * ny, LATERAL),
    ]).astype(np.int64)
    top_facet_of_cell = np.arange(nx, dtype=np.int64)

    mesh = VolumeMesh(vertices, triangles, facets, markers, top_facet_of_cell,
                      nx=nx, ny=ny)
    areas = triangle_areas(mesh)
    if np.any(areas <= 0.0):
        k = int(np.argmin(areas))
        raise GeometryError(f"non-positive triangle area {areas[k]:.3g} at cell {k}")
    return mesh


def remap_vertical(mesh: VolumeMesh, grid_old: SurfaceGrid,
                   grid_new: SurfaceGrid) -> VolumeMesh:
    """Move vertices to the new height, preserving relative height.

    Each vertex with s = (z - b)/(h_old - b) maps to z' = b + s*(h_new - b);
    connectivity, facets and markers are unchanged.
    """
    if not np.array_equal(grid_old.x, grid_new.x):
        raise GeometryError("remap requires grids sharing nodes")
    if not np.array_equal(grid_old.b, grid_new.b):
        raise GeometryError("remap requires grids sharing bedrock")
    ny = mesh.ny
    col = np.repeat(np.arange(mesh.nx + 1), ny + 1)
    b = grid_old.b[col]
    t_old = grid_old.thickness[col]
    t_new = grid_new.thickness[col]
    s = (mesh.vertices[:, 1] - b) / t_old
    z_new = b + s * t_new
    vertices = np.column_stack([mesh.vertices[:, 0], z_new])
    return VolumeMesh(vertices, mesh.triangles, mesh.facets, mesh.facet_markers,
                      mesh.top_facet_of_cell, nx=mesh.nx, ny=mesh.ny)


def surface_geometry(grid: SurfaceGrid, cell: int | None = None):
    """Outward unit normal n and arclength weight omega of the top surface.

    With s the cell slope of h: n = (-s, 1)/sqrt(1+s^2) and
    omega = sqrt(1+s^2) = 1/n_z. Returns per-cell arrays when cell is None.
    """
    s = grid.slopes()
    omega = np.sqrt(1.0 + s * s)
    n = np.column_stack([-s / omega, 1.0 / omega])
    if cell is None:
        return n, omega
    if not 0 <= cell < grid.n_cells:
        raise IndexError(f"cell {cell} out of range")
    return n[cell], float(omega[cell])


def domain_volume(grid: SurfaceGrid) -> float:
    """Volume (area in 2D) between bedrock and surface.

    Exact trapezoid quadrature of the piecewise-linear thickness.
    """
    t = grid.thickness
    dx = grid.cell_sizes
    return float(np.sum(0.5 * dx * (t[:-1] + t[1:])))


def triangle_areas(mesh: VolumeMesh) -> np.ndarray:
    """Signed areas (positive for correct orientation)."""
    p = mesh.vertices[mesh.triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
