"""Finite-element simulator for coupled Stokes/free-surface flow.

2D Taylor-Hood Stokes solver on an extruded moving mesh, coupled to a
piecewise-linear surface-height equation, with implicit, explicit,
weakly-stable explicit, FSSA and normal-penalty stabilized explicit
time stepping, plus the energy/volume diagnostics that verify the
schemes' stability and conservation properties at run time.
"""

from freestokes.mesh import (
    GeometryError,
    SurfaceGrid,
    VolumeMesh,
    build_extruded_mesh,
    domain_volume,
    remap_vertical,
    surface_geometry,
)

__all__ = [
    "GeometryError",
    "SurfaceGrid",
    "VolumeMesh",
    "build_extruded_mesh",
    "domain_volume",
    "remap_vertical",
    "surface_geometry",
]
