"""Case files: parsing, validation and model construction.

A case file is TOML with the sections ``[grid]``, ``[rock]``, ``[fluid]``,
``[initial]``, ``[well]``, ``[time]``, ``[solver]``, ``[output]`` and an
array of ``[[fracture]]`` tables.  Field units (psi, days, cP) are used in
the file and converted to SI here.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, fields, is_dataclass
from importlib import resources
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .assembly import FlowModel, WellSpec
from .errors import ConfigurationError
from .fluid import CompositionalFluid, ComponentSpec, OilWaterFluid, PengRobinson
from .grid import (ConnectivityGraph, FractureSegment, StructuredGrid, _piece_at, _segment_intersection,
                   build_matrix_grid, discretize_fractures)
from .state import FieldState, uniform_state

logger = logging.getLogger(__name__)

PSI = 6894.757293168
DAY = 86400.0
CP = 1e-3
BBL = 0.158987294928
P_STD = 101325.0
T_STD = 288.7

BUILTIN_CASES = ("case1", "case2", "case3", "case2_1", "case2_2")


@dataclass
class GridConfig:
    nx: int = 200
    ny: int = 200
    lx: float = 100.0
    ly: float = 100.0
    thickness: float = 1.0


@dataclass
class RockConfig:
    porosity: float = 0.05
    permeability: float = 1e-19
    compressibility_per_psi: float = 3.4e-4
    connate_water: float = 0.2
    fracture_porosity: float = 1.0


@dataclass
class ComponentConfig:
    name: str
    tc: float
    pc: float
    acentric: float
    molar_weight: float


@dataclass
class FluidConfig:
    mode: str = "oilwater"
    rho_ref: float = 5000.0
    c_oil: float = 1.45e-9
    mu_oil_cp: float = 1.0
    mu_gas_cp: float = 0.02
    s_or: float = 0.0
    s_gr: float = 0.0
    temperature: float = 340.0
    components: list = field(default_factory=list)
    bip: list = field(default_factory=list)


@dataclass
class InitialConfig:
    pressure_psi: float = 2500.0
    composition: list = field(default_factory=lambda: [1.0])


@dataclass
class WellConfig:
    bhp_psi: float = 1000.0
    well_index: float = 1e-12
    trajectory: list = field(default_factory=list)


@dataclass
class TimeConfig:
    total_days: float = 1500.0
    dt_max_days: float = 100.0
    dt0_days: float = 0.1
    growth: float = 1.2
    min_dt_days: float = 1e-4


@dataclass
class SolverConfig:
    kind: str = "standard"
    m: int = 2
    eps_p_psi: float = 0.3
    eps_set_psi: float | None = None
    max_iter: int = 25
    max_outer: int = 50
    max_dsg: float = 0.2
    eps_sg: float = 0.01
    initial_set: str = "touched"
    boundary_measure: str = "drift"


@dataclass
class OutputConfig:
    report_every_days: float = 0.0
    trace_flags: bool = False
    write_fields: bool = True


@dataclass
class FractureConfig:
    x0: float
    y0: float
    x1: float
    y1: float
    aperture: float = 1e-3
    permeability: float = 1e-10


@dataclass
class CaseConfig:
    name: str = "case"
    grid: GridConfig = field(default_factory=GridConfig)
    rock: RockConfig = field(default_factory=RockConfig)
    fluid: FluidConfig = field(default_factory=FluidConfig)
    initial: InitialConfig = field(default_factory=InitialConfig)
    well: WellConfig = field(default_factory=WellConfig)
    time: TimeConfig = field(default_factory=TimeConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    fractures: list = field(default_factory=list)

    def replace(self, **changes) -> "CaseConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"solver.kind": "localized"})``."""
        new = copy.deepcopy(self)
        for key, value in changes.items():
            obj = new
            *path, last = key.split(".")
            for part in path:
                obj = getattr(obj, part)
            if not hasattr(obj, last):
                raise ConfigurationError(f"unknown setting {key!r}")
            setattr(obj, last, value)
        new.validate()
        return new

    def validate(self) -> None:
        g, t, s = self.grid, self.time, self.solver
        if g.nx < 1 or g.ny < 1:
            raise ConfigurationError("grid needs nx, ny >= 1")
        if not (g.lx > 0 and g.ly > 0 and g.thickness > 0):
            raise ConfigurationError("grid extent and thickness must be positive")
        r = self.rock
        if not (r.porosity > 0 and r.permeability > 0 and r.fracture_porosity > 0):
            raise ConfigurationError("porosity and permeability must be positive")
        if not (0 <= r.connate_water < 1) or r.compressibility_per_psi < 0:
            raise ConfigurationError("invalid connate water or rock compressibility")
        if not (0 < t.dt0_days <= t.dt_max_days <= t.total_days):
            raise ConfigurationError("need 0 < dt0 <= dt_max <= total time")
        if t.growth < 1.0 or t.min_dt_days <= 0:
            raise ConfigurationError("timestep growth must be >= 1 and minimum step positive")
        if s.kind not in ("standard", "localized", "adaptive_dd"):
            raise ConfigurationError(f"unknown solver {s.kind!r}")
        if s.m < 1 or s.eps_p_psi <= 0 or s.max_iter < 1 or s.max_outer < 1:
            raise ConfigurationError("solver needs m >= 1, eps_p > 0 and positive iteration caps")
        if s.eps_set_psi is not None and s.eps_set_psi <= 0:
            raise ConfigurationError("set cutoff must be positive")
        if s.eps_sg <= 0 or s.max_dsg < 0:
            raise ConfigurationError("saturation cutoff must be positive and chop limit non-negative")
        if s.initial_set not in ("touched", "support") or s.boundary_measure not in ("drift", "update"):
            raise ConfigurationError("initial_set must be touched|support, boundary_measure drift|update")
        f = self.fluid
        if f.mode not in ("oilwater", "compositional"):
            raise ConfigurationError(f"unknown fluid mode {f.mode!r}")
        if f.mu_oil_cp <= 0 or f.mu_gas_cp <= 0 or f.temperature <= 0:
            raise ConfigurationError("viscosities and temperature must be positive")
        nc = len(f.components) if f.mode == "compositional" else 1
        if f.mode == "compositional":
            if nc < 2:
                raise ConfigurationError("compositional mode needs at least two components")
            bip = np.asarray(f.bip, dtype=float) if f.bip else np.zeros((nc, nc))
            if bip.shape != (nc, nc) or not np.allclose(bip, bip.T) or np.any(np.diag(bip) != 0):
                raise ConfigurationError("bip must be a symmetric nc x nc matrix with zero diagonal")
        z = np.asarray(self.initial.composition, dtype=float)
        if z.size != nc or np.any(z < 0) or abs(z.sum() - 1.0) > 1e-8:
            raise ConfigurationError(f"initial composition must have {nc} fractions summing to 1")
        if self.initial.pressure_psi <= 0 or self.well.bhp_psi <= 0 or self.well.well_index <= 0:
            raise ConfigurationError("pressures and well index must be positive")
        if not self.fractures:
            raise ConfigurationError("at least one fracture is required (wells connect to fracture cells)")
        if self.output.report_every_days < 0:
            raise ConfigurationError("report interval must be non-negative")


_SECTIONS = {
    "grid": GridConfig, "rock": RockConfig, "fluid": FluidConfig, "initial": InitialConfig,
    "well": WellConfig, "time": TimeConfig, "solver": SolverConfig, "output": OutputConfig,
}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigurationError(f"[{where}] must be a table")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigurationError(f"[{where}] unknown keys: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigurationError(f"[{where}] {exc}") from exc


def parse_case(text: str, name: str = "case") -> CaseConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"case file is not valid TOML: {exc}") from exc
    data = dict(data)
    cfg = CaseConfig(name=str(data.pop("name", name)))
    for key, cls in _SECTIONS.items():
        if key in data:
            section = dict(data.pop(key))
            if key == "fluid" and "components" in section:
                section["components"] = [_build(ComponentConfig, c, "fluid.components")
                                         for c in section["components"]]
            setattr(cfg, key, _build(cls, section, key))
    cfg.fractures = [_build(FractureConfig, f, "fracture") for f in data.pop("fracture", [])]
    if data:
        raise ConfigurationError(f"unknown top-level keys: {sorted(data)}")
    cfg.validate()
    return cfg


def load_case(source) -> CaseConfig:
    """Load a case from a file path or a built-in case name (e.g. ``"case1"``)."""
    path = Path(source)
    if path.exists():
        return parse_case(path.read_text(), path.stem)
    name = str(source)
    if name in BUILTIN_CASES:
        text = resources.files("locsim.cases").joinpath(f"{name}.toml").read_text()
        return parse_case(text, name)
    raise ConfigurationError(f"case file not found: {source}")


def to_dict(obj):
    if is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, list):
        return [to_dict(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# model construction

def build_graph(cfg: CaseConfig) -> ConnectivityGraph:
    g = cfg.grid
    spec = StructuredGrid(g.nx, g.ny, g.lx / g.nx, g.ly / g.ny, g.thickness)
    matrix = build_matrix_grid(spec, cfg.rock.permeability, cfg.rock.porosity)
    segs = [FractureSegment((f.x0, f.y0), (f.x1, f.y1), f.aperture, f.permeability) for f in cfg.fractures]
    return discretize_fractures(matrix, segs, cfg.rock.fracture_porosity, cfg.rock.permeability)


def well_connections(graph: ConnectivityGraph, trajectory) -> np.ndarray:
    """Fracture cells where a straight well trajectory crosses the fracture segments.

    Without a trajectory the well connects to every fracture cell.
    """
    if not trajectory:
        return graph.fracture_cells.copy()
    if len(trajectory) != 2:
        raise ConfigurationError("well trajectory must be two (x, y) points")
    path = FractureSegment(tuple(trajectory[0]), tuple(trajectory[1]))
    cells = []
    offset = graph.n_matrix
    for sid, seg in enumerate(graph.segments):
        pieces = [pc for pc in graph.pieces if pc.segment == sid]
        hit = _segment_intersection(seg, path)
        if hit is not None:
            f, _ = _piece_at(pieces, offset, hit[0])
            if f is not None:
                cells.append(f)
        offset += len(pieces)
    if not cells:
        raise ConfigurationError("well trajectory does not cross any fracture")
    return np.unique(np.asarray(cells, dtype=np.intp))


def build_fluid(cfg: CaseConfig, p_init: float):
    f = cfg.fluid
    if f.mode == "oilwater":
        return OilWaterFluid(rho_ref=f.rho_ref, c_oil=f.c_oil, p_ref=p_init, mu_oil=f.mu_oil_cp * CP,
                             mu_gas=f.mu_gas_cp * CP, s_or=f.s_or, s_gr=f.s_gr)
    comps = [ComponentSpec(c.name, c.tc, c.pc, c.acentric, c.molar_weight) for c in f.components]
    nc = len(comps)
    bip = np.asarray(f.bip, dtype=float) if f.bip else np.zeros((nc, nc))
    eos = PengRobinson(comps, bip, f.temperature)
    return CompositionalFluid(eos, mu_oil=f.mu_oil_cp * CP, mu_gas=f.mu_gas_cp * CP, s_or=f.s_or, s_gr=f.s_gr)


def build_model(cfg: CaseConfig):
    """Flow model and initial state for a case."""
    graph = build_graph(cfg)
    p0 = cfg.initial.pressure_psi * PSI
    fluid = build_fluid(cfg, p0)
    wcells = well_connections(graph, cfg.well.trajectory)
    well = WellSpec(cfg.well.bhp_psi * PSI, wcells, cfg.well.well_index)
    model = FlowModel(graph, fluid, [well], c_rock=cfg.rock.compressibility_per_psi / PSI,
                      p_ref=p0, connate_water=cfg.rock.connate_water)
    state = uniform_state(graph.n_cells, p0, cfg.initial.composition)
    if model.compositional:
        changed = fluid.substitute(state, np.arange(graph.n_cells))
        if changed.size:
            logger.warning("initial state is two-phase in %d cells", changed.size)
    return model, state


def matrix_field(graph: ConnectivityGraph, values) -> np.ndarray:
    """Matrix-cell values reshaped to ``(ny, nx)`` (row ``iy``, column ``ix``)."""
    g = graph.grid
    return np.asarray(values)[: graph.n_matrix].reshape(g.ny, g.nx)

