import numpy as np
import pytest

from locsim.assembly import FlowModel, WellSpec
from locsim.case import PSI
from locsim.fluid import GAS, OIL, TWO, CompositionalFluid, ComponentSpec, OilWaterFluid, PengRobinson
from locsim.grid import FractureSegment, StructuredGrid, build_matrix_grid, discretize_fractures
from locsim.state import FieldState, uniform_state

C1 = ComponentSpec("C1", 190.6, 4.599e6, 0.011, 0.01604)
C10 = ComponentSpec("C10", 617.7, 2.11e6, 0.4923, 0.14229)
C3 = ComponentSpec("C3", 369.8, 4.248e6, 0.152, 0.0441)


def c1c10_eos(T=340.0):
    return PengRobinson([C1, C10], np.array([[0.0, 0.05], [0.05, 0.0]]), T)


def ternary_eos(T=340.0):
    bip = np.array([[0.0, 0.01, 0.05], [0.01, 0.0, 0.02], [0.05, 0.02, 0.0]])
    return PengRobinson([C1, C3, C10], bip, T)


def small_graph(nx=6, ny=6, lx=6.0, ly=6.0, fractures=True, perm=1e-15):
    spec = StructuredGrid(nx, ny, lx / nx, ly / ny)
    g = build_matrix_grid(spec, perm, 0.2)
    if fractures:
        segs = [FractureSegment((0.3 * lx, 0.15 * ly), (0.37 * lx, 0.85 * ly), permeability=1e-11),
                FractureSegment((0.1 * lx, 0.52 * ly), (0.9 * lx, 0.47 * ly), permeability=1e-12)]
        g = discretize_fractures(g, segs, 1.0, perm)
    return g


def small_model(compositional=True, nx=6, ny=6, wells=True):
    g = small_graph(nx, ny)
    if compositional:
        fluid = CompositionalFluid(c1c10_eos(), mu_oil=1e-3, mu_gas=2e-5, s_or=0.1, s_gr=0.05)
    else:
        fluid = OilWaterFluid(rho_ref=5000.0, c_oil=1.45e-9, p_ref=2e7, mu_oil=1e-3, mu_gas=2e-5)
    w = [WellSpec(1000 * PSI, g.fracture_cells[:2], 1e-12)] if wells else []
    return FlowModel(g, fluid, w, c_rock=3.4e-4 / PSI, p_ref=2e7, connate_water=0.2)


def random_state(model, rng, p_lo=1500 * PSI, p_hi=3000 * PSI):
    n, nc = model.n_cells, model.nc
    s = uniform_state(n, 2e7, np.full(nc, 1.0 / nc))
    s.p = rng.uniform(p_lo, p_hi, n)
    if nc == 1:
        return s
    status = rng.choice([OIL, GAS, TWO], size=n)
    z = rng.dirichlet(np.ones(nc), size=n)
    s.x = z.copy()
    s.y = z.copy()
    two = status == TWO
    s.x[two] = rng.dirichlet(np.ones(nc), size=two.sum())
    s.y[two] = rng.dirichlet(np.ones(nc), size=two.sum())
    s.sg = np.where(two, rng.uniform(0.15, 0.85, n), np.where(status == GAS, 1.0, 0.0))
    s.status = status.astype(np.int8)
    return s


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
