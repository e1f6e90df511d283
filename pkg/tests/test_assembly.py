import numpy as np
import pytest
import scipy.sparse as sp

from locsim.assembly import (FlowModel, accumulation, apply_update, assemble, flux_ppu,
                             old_accumulation, upwind_cells, well_term)
from locsim.fluid import OilWaterFluid
from locsim.grid import StructuredGrid, build_matrix_grid

from conftest import random_state, small_model

STEPS = (1e-3, 1e-4, 1e-5, 1e-6, 1e-7)


def perturbed(state, c, d, h):
    s = state.copy()
    nc = state.nc
    s.p[c] += h * d[0]
    s.sg[c] += h * d[1]
    s.x[c] += h * d[2:2 + nc]
    s.y[c] += h * d[2 + nc:]
    return s


def fd_jacobian_error(model, state, acc_old, dt):
    """Worst column error of the assembled Jacobian against central differences.

    The perturbation follows the eliminated direction ``T e_u`` so the
    secondary variables move consistently with the primaries.  Each column
    uses the best step of a short ladder, which separates truncation from
    round-off.
    """
    sys_ = assemble(model, state, acc_old, dt)
    J = sys_.jac.toarray()
    nc = model.nc
    worst = 0.0
    for c in range(model.n_cells):
        for u in range(nc):
            d = sys_.T[c][:, u]
            ref = J[:, c * nc + u]
            scale = np.max(np.abs(ref))
            best = np.inf
            for h in STEPS:
                hh = h * state.p[c] / abs(d[0]) if u == 0 else h / np.max(np.abs(d[1:]))
                rp = assemble(model, perturbed(state, c, d, hh), acc_old, dt).residual.ravel()
                rm = assemble(model, perturbed(state, c, d, -hh), acc_old, dt).residual.ravel()
                col = (rp - rm) / (2 * hh)
                best = min(best, np.max(np.abs(col - ref)) / scale)
            worst = max(worst, best)
    return worst


@pytest.mark.parametrize("compositional", [False, True])
def test_jacobian_matches_finite_differences(compositional):
    rng = np.random.default_rng(7 if compositional else 8)
    model = small_model(compositional, nx=3, ny=3)
    worst = 0.0
    n_states = 100 if compositional else 20
    for _ in range(n_states):
        state = random_state(model, rng)
        old = random_state(model, rng)
        worst = max(worst, fd_jacobian_error(model, state, old_accumulation(model, old), 86400.0))
    assert worst < 1e-5


def test_restricted_rows_equal_full_rows(rng):
    model = small_model(True)
    state, old = random_state(model, rng), random_state(model, rng)
    acc_old = old_accumulation(model, old)
    full = assemble(model, state, acc_old, 3600.0)
    for _ in range(10):
        cells = np.unique(rng.choice(model.n_cells, size=rng.integers(1, model.n_cells), replace=False))
        part = assemble(model, state, acc_old, 3600.0, cells)
        assert np.array_equal(part.residual, full.residual[cells])
        rows = (cells[:, None] * model.nc + np.arange(model.nc)).ravel()
        sub = full.jac[rows][:, rows].toarray()
        assert np.array_equal(part.jac.toarray(), sub)


def test_apply_update_leaves_complement_untouched(rng):
    model = small_model(True)
    state, old = random_state(model, rng), random_state(model, rng)
    sys_ = assemble(model, state, old_accumulation(model, old), 3600.0, np.arange(5, 20))
    before = state.copy()
    apply_update(state, sys_, rng.normal(size=sys_.n_unknowns) * 1e-3)
    outside = np.setdiff1d(np.arange(model.n_cells), sys_.cells)
    assert state.equals(before, outside)
    assert not state.equals(before, sys_.cells)


def test_tpfa_patch_linear_pressure():
    # incompressible single phase: a linear pressure field has zero interior residual
    spec = StructuredGrid(7, 5, 2.0, 3.0)
    graph = build_matrix_grid(spec, 1e-14, 0.2)
    fluid = OilWaterFluid(rho_ref=800.0, c_oil=0.0, p_ref=1e7, mu_oil=1e-3, mu_gas=1e-5)
    model = FlowModel(graph, fluid, c_rock=0.0, p_ref=1e7)
    x, y = spec.cell_center(np.arange(spec.n_cells))
    st = random_state(model, np.random.default_rng(0))
    st.p = 1e7 + 3e3 * x - 2e3 * y
    res = assemble(model, st, old_accumulation(model, st), 1.0).residual[:, 0]
    ix, iy = spec.cell_ij(np.arange(spec.n_cells))
    interior = (ix > 0) & (ix < spec.nx - 1) & (iy > 0) & (iy < spec.ny - 1)
    flux_scale = 1e-14 * 3e3 * 3.0 / 1e-3 * 800.0
    assert np.max(np.abs(res[interior])) <= 1e-10 * flux_scale
    # boundary rows carry exactly the flux that leaves through the missing faces
    assert abs(res.sum()) <= 1e-10 * flux_scale * spec.n_cells


def test_jacobian_sparsity_matches_graph(rng):
    model = small_model(True)
    sys_ = assemble(model, random_state(model, rng), old_accumulation(model, random_state(model, rng)), 10.0)
    nc = model.nc
    g = model.graph
    pattern = sp.coo_matrix((np.ones(g.n_connections), (g.conn_i, g.conn_j)), shape=(g.n_cells,) * 2)
    pattern = (pattern + pattern.T + sp.eye(g.n_cells)).tocsr()
    blocks = sp.kron(pattern, np.ones((nc, nc))).tocsr()
    assert sys_.jac.nnz == blocks.nnz
    assert np.array_equal(sys_.jac.indices, blocks.indices)
    assert np.array_equal(sys_.jac.indptr, blocks.indptr)


def test_matrix_block_count_for_structured_grid():
    # 3x3 matrix grid, one primary: 9 diagonal and 24 off-diagonal entries
    spec = StructuredGrid(3, 3, 1.0, 1.0)
    graph = build_matrix_grid(spec, 1e-15, 0.2)
    model = FlowModel(graph, OilWaterFluid(), c_rock=1e-9, p_ref=1e7)
    st = random_state(model, np.random.default_rng(3))
    sys_ = assemble(model, st, old_accumulation(model, st), 10.0)
    assert sys_.jac.nnz == 9 + 24


def test_fluxes_are_antisymmetric(rng):
    model = small_model(True)
    state = random_state(model, rng)
    conns = np.arange(model.graph.n_connections)
    flux, _, _ = flux_ppu(model, state, conns)
    # reversing the pressure difference flips the sign when both ends share mobility
    st2 = state.copy()
    a, b = model.graph.conn_i, model.graph.conn_j
    st2.p[:] = 2e7
    flux0, _, _ = flux_ppu(model, st2, conns)
    assert np.all(flux0 == 0.0)
    # sum of flux contributions over all connections is conservative
    n = model.n_cells
    net = np.zeros((n, model.nc))
    np.add.at(net, a, flux)
    np.add.at(net, b, -flux)
    assert np.allclose(net.sum(axis=0), 0.0, atol=1e-12 * np.abs(flux).sum())


def test_upwind_ties_go_to_first_cell():
    p = np.array([1.0, 1.0, 2.0])
    up = upwind_cells(p, np.array([0, 0]), np.array([1, 2]))
    assert up.tolist() == [0, 2]


def test_well_rate_zero_at_bhp_and_linear_in_drawdown(rng):
    model = small_model(False)
    well = model.wells[0]
    state = random_state(model, rng)
    state.p[well.connected_cells] = well.bhp
    rate, _ = well_term(model, state, well)
    assert np.all(rate == 0.0)
    # frozen mobility: a fixed-density fluid makes the rate exactly linear in the drawdown
    fluid = OilWaterFluid(c_oil=0.0)
    frozen = FlowModel(model.graph, fluid, model.wells)
    state.p[well.connected_cells] = well.bhp + 1e5
    r1, _ = well_term(frozen, state, well)
    state.p[well.connected_cells] = well.bhp + 2e5
    r2, _ = well_term(frozen, state, well)
    assert np.allclose(r2, 2 * r1, rtol=1e-14)


def test_well_below_bhp_is_shut(rng):
    model = small_model(False)
    well = model.wells[0]
    state = random_state(model, rng)
    state.p[well.connected_cells] = well.bhp - 1e5
    rate, drate = well_term(model, state, well)
    assert np.all(rate == 0.0) and np.all(drate == 0.0)


def test_accumulation_zero_for_identical_states(rng):
    model = small_model(True)
    state = random_state(model, rng)
    r, _ = accumulation(model, state, state, np.arange(model.n_cells), 10.0)
    assert np.all(r == 0.0)
    with pytest.raises(ValueError):
        accumulation(model, state, state, [0], 0.0)


def test_assemble_rejects_empty_target(rng):
    model = small_model(True)
    state = random_state(model, rng)
    with pytest.raises(ValueError):
        assemble(model, state, old_accumulation(model, state), 1.0, [])


def test_accumulation_scales_with_inverse_dt(rng):
    model = small_model(True)
    a, b = random_state(model, rng), random_state(model, rng)
    r1, _ = accumulation(model, a, b, np.arange(10), 10.0)
    r2, _ = accumulation(model, a, b, np.arange(10), 20.0)
    assert np.allclose(r2, r1 / 2, rtol=1e-15)


def test_linear_single_phase_flux():
    # unit molar density and viscosity 1: flux = trans * (p_i - p_j)
    spec = StructuredGrid(2, 1, 1.0, 1.0)
    graph = build_matrix_grid(spec, 1e-12, 0.2)
    model = FlowModel(graph, OilWaterFluid(rho_ref=1.0, c_oil=0.0, mu_oil=1.0))
    st = random_state(model, np.random.default_rng(0))
    st.p[:] = [2e6, 1.5e6]
    flux, _, _ = flux_ppu(model, st, [0])
    assert flux[0, 0] == pytest.approx(graph.trans[0] * 5e5, rel=1e-14)
    st.p[:] = 1e6
    assert flux_ppu(model, st, [0])[0][0, 0] == 0.0


def test_upwind_flux_ignores_downstream_saturation(rng):
    model = small_model(True)
    state = random_state(model, rng)
    c = 0
    a, b = model.graph.conn_i[c], model.graph.conn_j[c]
    state.p[a], state.p[b] = 2e7, 1e7
    f1, _, _ = flux_ppu(model, state, [c])
    state.sg[b] = 0.5 if state.status[b] == 2 else state.sg[b]
    state.x[b] = state.x[b][::-1]
    f2, _, _ = flux_ppu(model, state, [c])
    assert np.array_equal(f1, f2)


def test_well_index_linearity(rng):
    model = small_model(True)
    state = random_state(model, rng)
    w = model.wells[0]
    r1, _ = well_term(model, state, w)
    from locsim.assembly import WellSpec
    w2 = WellSpec(w.bhp, w.connected_cells, 2 * w.well_index)
    r2, _ = well_term(model, state, w2)
    assert np.allclose(r2, 2 * r1, rtol=1e-15)


def test_full_target_equals_default(rng):
    model = small_model(True)
    state, old = random_state(model, rng), random_state(model, rng)
    acc_old = old_accumulation(model, old)
    a = assemble(model, state, acc_old, 60.0)
    b = assemble(model, state, acc_old, 60.0, np.arange(model.n_cells))
    assert np.array_equal(a.rhs, b.rhs) and (a.jac != b.jac).nnz == 0


def test_single_cell_target_uses_frozen_neighbour_fluxes():
    spec = StructuredGrid(3, 3, 1.0, 1.0)
    graph = build_matrix_grid(spec, 1e-14, 0.2)
    model = FlowModel(graph, OilWaterFluid(), c_rock=1e-9, p_ref=1e7)
    rng = np.random.default_rng(4)
    st, old = random_state(model, rng), random_state(model, rng)
    acc_old = old_accumulation(model, old)
    sys_ = assemble(model, st, acc_old, 100.0, [4])
    acc, _ = accumulation(model, st, old, [4], 100.0)
    nb = graph.neighbors(4)
    conns = [np.flatnonzero(((graph.conn_i == 4) & (graph.conn_j == j)) | ((graph.conn_j == 4) & (graph.conn_i == j)))[0]
             for j in nb]
    flux, _, _ = flux_ppu(model, st, conns)
    sign = np.where(graph.conn_i[conns] == 4, 1.0, -1.0)
    assert len(nb) == 4
    assert sys_.residual[0, 0] == pytest.approx(acc[0, 0] + np.sum(sign * flux[:, 0]), rel=1e-12)
