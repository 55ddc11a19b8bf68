"""Case definitions and configuration parsing.

Two built-in cases: the Newtonian tank (nondimensional) and a seeded
synthetic Greenland-like slice (SI units, power-law rheology, times in
years). Configurations are a line-oriented ``key = value`` text format with
``#`` comments; unknown keys are rejected with their line number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from freestokes.mesh import SurfaceGrid
from freestokes.schemes import SchemeKind, SimConfig
from freestokes.stokes import FluidParams

YEAR_SECONDS = 31_556_926.0

# Glen's-law softness reported for the ice case; converted to the power-law
# viscosity coefficient below (n = 1/(p-1)).
GREENLAND_SOFTNESS_A = 3.1688e-24  # Pa^-3 s^-1
GREENLAND_X0 = -428_675.0
GREENLAND_X1 = 489_475.0


class ConfigError(Exception):
    pass


def glen_viscosity_coefficient(softness: float, n: float = 3.0) -> float:
    """Power-law coefficient mu0 from Glen softness A.

    mu = (1/2) A^(-1/n) eff^((1-n)/n) with eff the second invariant; in the
    Frobenius-norm convention used here that is
    mu0 = (1/2) 2^((n-1)/(2n)) A^(-1/n).
    """
    return 0.5 * 2.0 ** ((n - 1.0) / (2.0 * n)) * softness ** (-1.0 / n)


@dataclass(frozen=True)
class SourceSpec:
    """Closed-form source term a(x, t)."""

    kind: str = "none"              # none | tank-oscillating | constant
    value: float = 0.0              # for kind == constant

    def __post_init__(self):
        if self.kind not in ("none", "tank-oscillating", "constant"):
            raise ConfigError(f"unknown source kind {self.kind!r}")

    @classmethod
    def from_string(cls, text: str) -> "SourceSpec":
        text = text.strip()
        if text.startswith("constant:"):
            return cls("constant", float(text.split(":", 1)[1]))
        return cls(text)

    def to_string(self) -> str:
        if self.kind == "constant":
            return f"constant:{self.value!r}"
        return self.kind

    def fn(self):
        if self.kind == "none":
            return None
        if self.kind == "tank-oscillating":
            return lambda x, t: 0.2 * x**2 * (0.3 + np.sin(x)) * np.sin(2.0 * t)
        value = self.value
        return lambda x, t: np.full_like(np.asarray(x, dtype=float), value)


@dataclass(frozen=True)
class CaseConfig:
    """Geometry, fluid, source and resolution of one test case."""

    name: str                       # tank | greenland-synthetic | custom
    x0: float
    x1: float
    nx: int
    ny: int
    fluid: FluidParams
    source: SourceSpec
    t_final: float                  # base time unit (s for si-years)
    units: str = "nondimensional"   # nondimensional | si-years
    seed: int = 0
    b_const: float = -1.0
    h0_const: float = 1.0
    # seeded profile coefficients (greenland-synthetic)
    bed_amps: Tuple[float, ...] = ()
    bed_freqs: Tuple[int, ...] = ()
    bed_phases: Tuple[float, ...] = ()
    pert_amps: Tuple[float, ...] = ()
    pert_freqs: Tuple[int, ...] = ()
    pert_phases: Tuple[float, ...] = ()
    dome_height: float = 2500.0
    thickness_floor: float = 100.0

    def __post_init__(self):
        if self.x1 <= self.x0:
            raise ConfigError("empty horizontal interval")
        if self.nx < 1 or self.ny < 1:
            raise ConfigError("nx and ny must be >= 1")
        if self.units not in ("nondimensional", "si-years"):
            raise ConfigError(f"unknown unit system {self.units!r}")

    @property
    def a_fn(self):
        return self.source.fn()

    def _xi(self, x):
        return (x - self.x0) / (self.x1 - self.x0)

    def _sinusoids(self, x, amps, freqs, phases):
        xi = self._xi(np.asarray(x, dtype=float))
        out = np.zeros_like(xi)
        for a, k, ph in zip(amps, freqs, phases):
            out += a * np.sin(2.0 * math.pi * k * xi + ph)
        return out

    def bedrock(self, x):
        x = np.asarray(x, dtype=float)
        if self.name == "greenland-synthetic":
            return self._sinusoids(x, self.bed_amps, self.bed_freqs, self.bed_phases)
        return np.full_like(x, self.b_const)

    def height0(self, x):
        x = np.asarray(x, dtype=float)
        if self.name == "tank":
            return 0.5 * np.tanh(2.0 * x - 1.0) + 0.2
        if self.name == "greenland-synthetic":
            xi = self._xi(x)
            dome = self.dome_height * 4.0 * xi * (1.0 - xi)
            pert = np.sin(math.pi * xi) * self._sinusoids(
                x, self.pert_amps, self.pert_freqs, self.pert_phases)
            return self.bedrock(x) + self.thickness_floor + dome + pert
        return np.full_like(x, self.h0_const)

    def build_grid(self, nx: Optional[int] = None) -> SurfaceGrid:
        nx = self.nx if nx is None else nx
        x = np.linspace(self.x0, self.x1, nx + 1)
        return SurfaceGrid(x, self.height0(x), self.bedrock(x))


def tank_case(nx: int = 40, ny: int = 40, mu: float = 0.3, b_const: float = -1.0,
              source: str = "none", t_final: float = 4.0) -> CaseConfig:
    """Newtonian fluid in a tank: interval [-1, 1], h0 = 0.5 tanh(2x-1)+0.2.

    The reported body force is (0, -9.82); split as rho = 1, g = 9.82. The
    stated bedrock (0) would make the thickness negative at the left wall,
    so the default is b = -1, configurable.
    """
    return CaseConfig(
        name="tank", x0=-1.0, x1=1.0, nx=nx, ny=ny,
        fluid=FluidParams(rho=1.0, g=9.82, mu0=mu, p=2.0),
        source=SourceSpec.from_string(source), t_final=t_final,
        b_const=b_const)


def greenland_synthetic_case(seed: int = 0, nx: int = 300, ny: int = 20,
                             t_final_years: float = 200.0) -> CaseConfig:
    """Synthetic stand-in for the Greenland slice: seeded smooth bedrock
    (sum of 20 sinusoids, total amplitude <= 400 m) under a smooth dome with
    a 100 m thickness floor; SI units, power-law p = 4/3, a = 0.

    The same seed rebuilds identical profiles bitwise.
    """
    rng = np.random.default_rng(seed)
    n_modes = 20
    freqs = tuple(int(k) for k in rng.integers(1, 12, n_modes))
    raw = rng.uniform(0.3, 1.0, n_modes) / np.arange(1, n_modes + 1) ** 0.5
    bed_amps = tuple(float(a) for a in raw / np.sum(raw) * 400.0)
    bed_phases = tuple(float(p) for p in rng.uniform(0, 2 * math.pi, n_modes))
    pfreqs = tuple(int(k) for k in rng.integers(1, 12, n_modes))
    raw_p = rng.uniform(0.3, 1.0, n_modes) / np.arange(1, n_modes + 1) ** 0.5
    pert_amps = tuple(float(a) for a in raw_p / np.sum(raw_p) * 250.0)
    pert_phases = tuple(float(p) for p in rng.uniform(0, 2 * math.pi, n_modes))
    fluid = FluidParams(rho=910.0, g=9.82,
                        mu0=glen_viscosity_coefficient(GREENLAND_SOFTNESS_A),
                        p=4.0 / 3.0, delta=1e-10)
    return CaseConfig(
        name="greenland-synthetic", x0=GREENLAND_X0, x1=GREENLAND_X1,
        nx=nx, ny=ny, fluid=fluid, source=SourceSpec("none"),
        t_final=t_final_years * YEAR_SECONDS, units="si-years", seed=seed,
        bed_amps=bed_amps, bed_freqs=freqs, bed_phases=bed_phases,
        pert_amps=pert_amps, pert_freqs=pfreqs, pert_phases=pert_phases)


def custom_case(x0: float, x1: float, nx: int, ny: int, fluid: FluidParams,
                h0_const: float = 1.0, b_const: float = 0.0,
                source: str = "none", t_final: float = 1.0) -> CaseConfig:
    return CaseConfig(name="custom", x0=x0, x1=x1, nx=nx, ny=ny, fluid=fluid,
                      source=SourceSpec.from_string(source), t_final=t_final,
                      b_const=b_const, h0_const=h0_const)


# ---------------------------------------------------------------------------
# configuration text format

_BOOL = {"on": True, "off": False, "true": True, "false": False}

_KNOWN_KEYS = {
    "case", "scheme", "dt", "dt_years", "t_final", "t_final_years",
    "nx", "ny", "mu", "mu0", "p", "rho", "g", "delta", "source",
    "edge_stab", "eps", "dt_max", "dt_max_years", "coupling_tol", "max_outer",
    "picard_tol", "picard_max_iter", "seed", "b_const", "h0_const",
    "x0", "x1", "csv", "vtk_dir", "vtk_every",
}

_REQUIRED = ("case", "scheme")


def _parse_value(key, raw, line_no, cast):
    try:
        return cast(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"line {line_no}: bad value for {key!r}: {raw!r}") from exc


def parse_config(text: str) -> SimConfig:
    """Parse the line-oriented ``key = value`` format into a SimConfig."""
    entries = {}
    lines = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {line_no}: expected 'key = value'")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        if key in entries:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        entries[key] = raw
        lines[key] = line_no

    for key in _REQUIRED:
        if key not in entries:
            raise ConfigError(f"missing required key {key!r}")

    def take(key, cast, default=None):
        if key not in entries:
            return default
        return _parse_value(key, entries[key], lines[key], cast)

    def take_bool(key, default):
        if key not in entries:
            return default
        raw = entries[key].lower()
        if raw not in _BOOL:
            raise ConfigError(f"line {lines[key]}: bad value for {key!r}: "
                              f"expected on/off")
        return _BOOL[raw]

    case_name = entries["case"]
    seed = take("seed", int, 0)
    nx = take("nx", int)
    ny = take("ny", int)
    if case_name == "tank":
        case = tank_case(nx=nx or 40, ny=ny or 40,
                         mu=take("mu", float, take("mu0", float, 0.3)),
                         b_const=take("b_const", float, -1.0),
                         source=take("source", str, "none"),
                         t_final=take("t_final", float, 4.0))
    elif case_name == "greenland-synthetic":
        case = greenland_synthetic_case(
            seed=seed, nx=nx or 300, ny=ny or 20,
            t_final_years=take("t_final_years", float, 200.0))
        if "t_final" in entries:
            case = replace(case, t_final=take("t_final", float))
    elif case_name == "custom":
        fluid = FluidParams(rho=take("rho", float, 1.0),
                            g=take("g", float, 9.82),
                            mu0=take("mu0", float, take("mu", float, 1.0)),
                            p=take("p", float, 2.0),
                            delta=take("delta", float, 1e-10))
        case = custom_case(x0=take("x0", float, -1.0), x1=take("x1", float, 1.0),
                           nx=nx or 16, ny=ny or 8, fluid=fluid,
                           h0_const=take("h0_const", float, 1.0),
                           b_const=take("b_const", float, 0.0),
                           source=take("source", str, "none"),
                           t_final=take("t_final", float, 1.0))
    else:
        raise ConfigError(f"line {lines['case']}: unknown case {case_name!r}")

    # fluid overrides applicable to any case
    overrides = {}
    for key, attr in (("rho", "rho"), ("g", "g"), ("mu0", "mu0"), ("p", "p"),
                      ("delta", "delta")):
        if key in entries and case_name != "custom":
            overrides[attr] = take(key, float)
    if case_name == "tank" and "mu" in entries:
        overrides.setdefault("mu0", take("mu", float))
    if overrides:
        case = replace(case, fluid=replace(case.fluid, **overrides))

    year = YEAR_SECONDS if case.units == "si-years" else None
    dt = take("dt", float)
    if dt is None and "dt_years" in entries:
        if year is None:
            raise ConfigError(f"line {lines['dt_years']}: dt_years requires an "
                              "si-years case")
        dt = take("dt_years", float) * year
    if dt is None:
        raise ConfigError("missing required key 'dt' (or 'dt_years')")

    dt_max = take("dt_max", float)
    if dt_max is None and "dt_max_years" in entries:
        if year is None:
            raise ConfigError(f"line {lines['dt_max_years']}: dt_max_years "
                              "requires an si-years case")
        dt_max = take("dt_max_years", float) * year

    scheme = SchemeKind(entries["scheme"], eps=take("eps", float, 0.9),
                        dt_max=dt_max)
    return SimConfig(
        case=case, scheme=scheme, dt=dt, t_final=case.t_final,
        edge_stab=take_bool("edge_stab", True),
        coupling_tol=take("coupling_tol", float, 1e-8),
        max_outer=take("max_outer", int, 50),
        picard_tol=take("picard_tol", float, 1e-6),
        picard_max_iter=take("picard_max_iter", int, 50),
        csv_path=take("csv", str), vtk_dir=take("vtk_dir", str),
        vtk_every=take("vtk_every", int, 1))


def serialize_config(cfg: SimConfig) -> str:
    """Canonical text form; parse_config(serialize_config(cfg)) == cfg."""
    case = cfg.case
    out = [f"case = {case.name}", f"scheme = {cfg.scheme.name}",
           f"dt = {cfg.dt!r}", f"t_final = {cfg.t_final!r}",
           f"nx = {case.nx}", f"ny = {case.ny}",
           f"rho = {case.fluid.rho!r}", f"g = {case.fluid.g!r}",
           f"mu0 = {case.fluid.mu0!r}", f"p = {case.fluid.p!r}",
           f"delta = {case.fluid.delta!r}",
           f"source = {case.source.to_string()}",
           f"edge_stab = {'on' if cfg.edge_stab else 'off'}",
           f"eps = {cfg.scheme.eps!r}",
           f"coupling_tol = {cfg.coupling_tol!r}",
           f"max_outer = {cfg.max_outer}",
           f"picard_tol = {cfg.picard_tol!r}",
           f"picard_max_iter = {cfg.picard_max_iter}",
           f"seed = {case.seed}",
           f"vtk_every = {cfg.vtk_every}"]
    if cfg.scheme.dt_max is not None:
        out.append(f"dt_max = {cfg.scheme.dt_max!r}")
    if case.name in ("tank", "custom"):
        out.append(f"b_const = {case.b_const!r}")
    if case.name == "custom":
        out.append(f"h0_const = {case.h0_const!r}")
        out.append(f"x0 = {case.x0!r}")
        out.append(f"x1 = {case.x1!r}")
    if cfg.csv_path:
        out.append(f"csv = {cfg.csv_path}")
    if cfg.vtk_dir:
        out.append(f"vtk_dir = {cfg.vtk_dir}")
    return "\n".join(out) + "\n"
