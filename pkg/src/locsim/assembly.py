"""Fully-implicit residual and Jacobian over a full or restricted cell set.

Each cell carries the full natural-variable vector
``w = (p, s_g, x_1..x_nc, y_1..y_nc)``.  Depending on the phase status only
``nc`` of them are primary; the rest are eliminated cell by cell through a
linear map ``dw = T du + t``.  For single-phase cells ``T`` is a constant
selection matrix (the absent phase copies the present one) and ``t = 0``.
For two-phase cells the secondaries follow from linearising the local
equilibrium equations (fugacity equality and the two composition sums).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import AssemblyError
from .fluid import GAS, OIL, TWO, relperm
from .grid import FRACTURE, ConnectivityGraph
from .state import FieldState

logger = logging.getLogger(__name__)


@dataclass
class WellSpec:
    """Bottom-hole-pressure controlled producer connected to fracture cells."""
    bhp: float
    connected_cells: np.ndarray
    well_index: np.ndarray
    name: str = "PROD"

    def __post_init__(self):
        self.connected_cells = np.asarray(self.connected_cells, dtype=np.intp)
        wi = np.asarray(self.well_index, dtype=float)
        if wi.ndim == 0:
            wi = np.full(self.connected_cells.size, float(wi))
        self.well_index = wi
        if self.bhp <= 0:
            raise ValueError("well BHP must be positive")
        if wi.shape != self.connected_cells.shape or np.any(wi <= 0):
            raise ValueError("one positive well index per connected cell is required")


@dataclass
class FlowModel:
    """Everything the residual needs besides the state and the timestep."""
    graph: ConnectivityGraph
    fluid: object
    wells: list = field(default_factory=list)
    c_rock: float = 0.0
    p_ref: float = 1.0e7
    connate_water: float = 0.0

    def __post_init__(self):
        g = self.graph
        frac = g.cell_kind == FRACTURE
        hc = np.where(frac, 1.0, 1.0 - self.connate_water)
        self.pore_volume_ref = g.cell_volumes * g.porosity * hc
        self.nc = self.fluid.nc
        self.nw = 2 + 2 * self.nc
        self.compositional = hasattr(self.fluid, "eos")
        self._well_cells = np.concatenate(
            [w.connected_cells for w in self.wells]) if self.wells else np.zeros(0, dtype=np.intp)
        self._well_wi = np.concatenate(
            [w.well_index for w in self.wells]) if self.wells else np.zeros(0)
        self._well_bhp = np.concatenate(
            [np.full(w.connected_cells.size, w.bhp) for w in self.wells]) if self.wells else np.zeros(0)
        self._well_id = np.concatenate(
            [np.full(w.connected_cells.size, k) for k, w in enumerate(self.wells)]) \
            if self.wells else np.zeros(0, dtype=np.intp)

    @property
    def n_cells(self) -> int:
        return self.graph.n_cells

    def pore_volume(self, p):
        """Pore volume available to hydrocarbons and its pressure derivative."""
        return self.pore_volume_ref * (1.0 + self.c_rock * (p - self.p_ref)), self.pore_volume_ref * self.c_rock

    def well_cells(self) -> np.ndarray:
        return np.unique(self._well_cells)


@dataclass
class ReducedSystem:
    """Restricted Newton system over ``cells``; frozen neighbours enter only the residual."""
    cells: np.ndarray
    residual: np.ndarray
    rhs: np.ndarray
    jac: sp.csr_matrix
    T: np.ndarray
    t: np.ndarray
    block: int

    @property
    def n_unknowns(self) -> int:
        return self.cells.size * self.block


# ---------------------------------------------------------------------------
# per-cell terms

def _check_status(state: FieldState, cells):
    st = state.status[cells]
    sg = state.sg[cells]
    bad = ((st == OIL) & (sg != 0.0)) | ((st == GAS) & (sg != 1.0)) | ~np.isin(st, (OIL, GAS, TWO))
    if np.any(bad):
        i = int(np.asarray(cells)[np.flatnonzero(bad)[0]])
        raise AssemblyError(f"cell {i}: status {int(state.status[i])} inconsistent with s_g={state.sg[i]}")


def _phase_densities(model: FlowModel, p, x, y):
    fl = model.fluid
    if model.compositional:
        po = fl.eos.phase_properties(p, x, "liquid")
        pg = fl.eos.phase_properties(p, y, "vapor")
        return po, pg
    rho, rho_p, rho_x = fl.phase_density(p, x, "oil")
    po = dict(rho=rho, rho_p=rho_p, rho_x=rho_x)
    return po, po


def accumulation_terms(model: FlowModel, state: FieldState, cells):
    """Component moles in place per cell and their derivatives with respect to ``w``."""
    return _cell_terms(model, state, cells, with_transform=False, with_mobility=False)[:2]


def _cell_terms(model: FlowModel, state: FieldState, cells, with_transform=True, with_mobility=True,
                props=None):
    nc, nw = model.nc, model.nw
    fl = model.fluid
    p = state.p[cells]
    sg = state.sg[cells]
    x = state.x[cells]
    y = state.y[cells]
    k = p.size
    so = 1.0 - sg
    po, pg = props if props is not None else _phase_densities(model, p, x, y)
    ro, rg = po["rho"], pg["rho"]
    eye = np.eye(nc)

    pv, dpv = _pv_subset(model, p, cells)
    mo = x * (ro * so)[:, None]
    mg = y * (rg * sg)[:, None]
    acc = pv[:, None] * (mo + mg)
    dacc = np.zeros((k, nc, nw))
    dacc[:, :, 0] = dpv[:, None] * (mo + mg) + pv[:, None] * (
        x * (po["rho_p"] * so)[:, None] + y * (pg["rho_p"] * sg)[:, None])
    dacc[:, :, 1] = pv[:, None] * (y * rg[:, None] - x * ro[:, None])
    dacc[:, :, 2:2 + nc] = (pv * so)[:, None, None] * (
        eye[None] * ro[:, None, None] + x[:, :, None] * po["rho_x"][:, None, :])
    dacc[:, :, 2 + nc:] = (pv * sg)[:, None, None] * (
        eye[None] * rg[:, None, None] + y[:, :, None] * pg["rho_x"][:, None, :])
    if not with_mobility:
        return acc, dacc

    kro, dkro = relperm(so, fl.s_or, fl.s_gr)
    krg, dkrg = relperm(sg, fl.s_gr, fl.s_or)
    lo, lg = kro / fl.mu_oil, krg / fl.mu_gas
    mob = x * (ro * lo)[:, None] + y * (rg * lg)[:, None]
    dmob = np.zeros((k, nc, nw))
    dmob[:, :, 0] = x * (po["rho_p"] * lo)[:, None] + y * (pg["rho_p"] * lg)[:, None]
    dmob[:, :, 1] = -x * (ro * dkro / fl.mu_oil)[:, None] + y * (rg * dkrg / fl.mu_gas)[:, None]
    dmob[:, :, 2:2 + nc] = lo[:, None, None] * (
        eye[None] * ro[:, None, None] + x[:, :, None] * po["rho_x"][:, None, :])
    dmob[:, :, 2 + nc:] = lg[:, None, None] * (
        eye[None] * rg[:, None, None] + y[:, :, None] * pg["rho_x"][:, None, :])
    if not with_transform:
        return acc, dacc, mob, dmob

    T, t = _secondary_map(model, state, cells, po, pg)
    return acc, dacc, mob, dmob, T, t


def _pv_subset(model: FlowModel, p, cells):
    ref = model.pore_volume_ref[cells]
    return ref * (1.0 + model.c_rock * (p - model.p_ref)), ref * model.c_rock


def _secondary_map(model: FlowModel, state: FieldState, cells, po, pg):
    nc, nw = model.nc, model.nw
    st = state.status[cells]
    k = st.size
    T = np.zeros((k, nw, nc))
    t = np.zeros((k, nw))
    T[:, 0, 0] = 1.0
    xi = np.arange(2, 2 + nc)
    yi = np.arange(2 + nc, 2 + 2 * nc)
    for status, own, copy in ((OIL, xi, yi), (GAS, yi, xi)):
        rows = np.flatnonzero(st == status)
        if rows.size == 0 or nc == 1:
            continue
        for j in range(nc - 1):
            for idx in (own, copy):
                T[rows, idx[j], 1 + j] = 1.0
                T[rows, idx[-1], 1 + j] = -1.0
    rows = np.flatnonzero(st == TWO)
    if rows.size:
        if nc < 2:
            raise AssemblyError("two-phase cells need at least two components")
        c = np.asarray(cells)[rows]
        x, y = state.x[c], state.y[c]
        if np.any(x <= 0) or np.any(y <= 0):
            raise AssemblyError("non-positive phase composition in a two-phase cell")
        prim = np.r_[0, 1, 2:2 + nc - 2]
        sec = np.r_[2 + nc - 2:2 + 2 * nc]
        ne = nc + 2
        G = np.zeros((rows.size, ne))
        dG = np.zeros((rows.size, ne, nw))
        lo, lg = po["lnphi"][rows], pg["lnphi"][rows]
        G[:, :nc] = lo + np.log(x) - lg - np.log(y)
        G[:, nc] = x.sum(axis=1) - 1.0
        G[:, nc + 1] = y.sum(axis=1) - 1.0
        dG[:, :nc, 0] = po["lnphi_p"][rows] - pg["lnphi_p"][rows]
        dG[:, :nc, 2:2 + nc] = po["lnphi_x"][rows] + np.eye(nc)[None] / x[:, None, :]
        dG[:, :nc, 2 + nc:] = -(pg["lnphi_x"][rows] + np.eye(nc)[None] / y[:, None, :])
        dG[:, nc, 2:2 + nc] = 1.0
        dG[:, nc + 1, 2 + nc:] = 1.0
        GS = dG[:, :, sec]
        GP = dG[:, :, prim]
        rhs = np.concatenate([GP, G[:, :, None]], axis=2)
        try:
            sol = np.linalg.solve(GS, -rhs)
        except np.linalg.LinAlgError as exc:
            raise AssemblyError("singular local equilibrium system") from exc
        Tr = np.zeros((rows.size, nw, nc))
        Tr[:, prim, np.arange(nc)] = 1.0
        Tr[:, sec, :] = sol[:, :, :nc]
        T[rows] = Tr
        t[rows[:, None], sec[None, :]] = sol[:, :, nc]
    return T, t


# ---------------------------------------------------------------------------
# public term helpers

def accumulation(model: FlowModel, state_new: FieldState, state_old: FieldState, cells, dt: float):
    """Accumulation residual ``(acc_new - acc_old) / dt`` and its derivative in ``w``."""
    if dt <= 0:
        raise ValueError("timestep must be positive")
    cells = np.atleast_1d(np.asarray(cells, dtype=np.intp))
    acc, dacc = accumulation_terms(model, state_new, cells)
    acc_old, _ = accumulation_terms(model, state_old, cells)
    return (acc - acc_old) / dt, dacc / dt


def upwind_cells(p, conn_i, conn_j):
    """Upstream cell per connection (the higher-pressure side; ties go to ``conn_i``)."""
    return np.where(p[conn_i] >= p[conn_j], conn_i, conn_j)


def flux_ppu(model: FlowModel, state: FieldState, conn_ids):
    """Component fluxes from ``conn_i`` to ``conn_j`` for the given connections.

    Returns ``(flux (m, nc), d/dw_i (m, nc, nw), d/dw_j (m, nc, nw))``.
    Without gravity and capillarity both phases share the potential
    difference ``p_i - p_j``, so the upstream cell is common to both.
    """
    g = model.graph
    conn_ids = np.atleast_1d(np.asarray(conn_ids, dtype=np.intp))
    a, b = g.conn_i[conn_ids], g.conn_j[conn_ids]
    cells = np.unique(np.concatenate([a, b]))
    _, _, mob, dmob = _cell_terms(model, state, cells, with_transform=False)
    loc = np.searchsorted(cells, np.concatenate([a, b])).reshape(2, -1)
    up = upwind_cells(state.p, a, b)
    up_is_a = up == a
    lu = np.where(up_is_a, loc[0], loc[1])
    ups = g.trans[conn_ids]
    dp = state.p[a] - state.p[b]
    flux = (ups * dp)[:, None] * mob[lu]
    dmob_u = (ups * dp)[:, None, None] * dmob[lu]
    d_a = np.where(up_is_a[:, None, None], dmob_u, 0.0)
    d_b = np.where(up_is_a[:, None, None], 0.0, dmob_u)
    d_a[:, :, 0] += ups[:, None] * mob[lu]
    d_b[:, :, 0] -= ups[:, None] * mob[lu]
    return flux, d_a, d_b


def well_term(model: FlowModel, state: FieldState, well: WellSpec):
    """Production rates (mol/s per component) for each connection of ``well``.

    Returns ``(rate (m, nc), d rate / dw (m, nc, nw))``.  Connections whose
    pressure is below the BHP are shut (rate clamped to zero).
    """
    cells = well.connected_cells
    _, _, mob, dmob = _cell_terms(model, state, cells, with_transform=False)
    dd = state.p[cells] - well.bhp
    if np.any(dd < 0):
        logger.debug("well %s: %d connections below BHP clamped", well.name, int(np.sum(dd < 0)))
    open_ = dd > 0
    dd = np.where(open_, dd, 0.0)
    wi = well.well_index
    rate = (wi * dd)[:, None] * mob
    drate = (wi * dd)[:, None, None] * dmob
    drate[:, :, 0] += np.where(open_, wi, 0.0)[:, None] * mob
    return rate, drate


# ---------------------------------------------------------------------------
# assembly

def old_accumulation(model: FlowModel, state_old: FieldState) -> np.ndarray:
    """Component moles in place at the start of a timestep for every cell."""
    return accumulation_terms(model, state_old, np.arange(model.n_cells))[0]


def assemble(model: FlowModel, state: FieldState, acc_old: np.ndarray, dt: float,
             target=None) -> ReducedSystem:
    """Residual and Jacobian for the rows of ``target`` (all cells when None).

    Cells outside ``target`` keep their current state: their fluxes into
    the set enter the residual but get no Jacobian column.
    """
    g = model.graph
    n, nc, nw = g.n_cells, model.nc, model.nw
    if target is None:
        cells = np.arange(n, dtype=np.intp)
    else:
        cells = np.unique(np.asarray(target, dtype=np.intp))
    if cells.size == 0:
        raise ValueError("target set must be nonempty")
    if dt <= 0:
        raise ValueError("timestep must be positive")
    _check_status(state, cells)
    k = cells.size
    loc = np.full(n, -1, dtype=np.intp)
    loc[cells] = np.arange(k)

    if k == n:
        conns = np.arange(g.n_connections, dtype=np.intp)
    else:
        _, _, cid = g.gather(cells)
        conns = np.unique(cid)
    ca, cb = g.conn_i[conns], g.conn_j[conns]
    needed = np.unique(np.concatenate([cells, ca, cb])) if k < n else cells
    nloc = np.searchsorted(needed, cells)
    acc, dacc, mob, dmob, T, t = _cell_terms(model, state, needed)
    T_t, t_t = T[nloc], t[nloc]
    in_t = loc[needed] >= 0

    # effective mobility derivatives/shift for cells in the target; frozen cells use raw values
    dmob_eff = np.einsum("kcw,kwu->kcu", dmob, T)
    mob_shift = np.where(in_t[:, None], np.einsum("kcw,kw->kc", dmob, t), 0.0)

    acc_t = acc[nloc]
    res = (acc_t - acc_old[cells]) / dt
    shift = np.einsum("kcw,kw->kc", dacc[nloc], t_t) / dt
    diag = np.einsum("kcw,kwu->kcu", dacc[nloc], T_t) / dt

    # connection fluxes
    p = state.p
    up = upwind_cells(p, ca, cb)
    up_is_a = up == ca
    lu = np.searchsorted(needed, up)
    ups = g.trans[conns]
    dp = p[ca] - p[cb]
    mob_u = mob[lu]
    flux = (ups * dp)[:, None] * mob_u
    fshift = (ups * dp)[:, None] * mob_shift[lu]
    dflux_u = (ups * dp)[:, None, None] * dmob_eff[lu]
    d_a = np.where(up_is_a[:, None, None], dflux_u, 0.0)
    d_b = np.where(up_is_a[:, None, None], 0.0, dflux_u)
    d_a[:, :, 0] += ups[:, None] * mob_u
    d_b[:, :, 0] -= ups[:, None] * mob_u

    la, lb = loc[ca], loc[cb]
    ra, rb = la >= 0, lb >= 0
    rows = np.concatenate([la[ra], lb[rb]])
    np.add.at(res, rows, np.concatenate([flux[ra], -flux[rb]]))
    np.add.at(shift, rows, np.concatenate([fshift[ra], -fshift[rb]]))
    np.add.at(diag, rows, np.concatenate([d_a[ra], -d_b[rb]]))

    # wells
    if model._well_cells.size:
        wl = loc[model._well_cells]
        sel = np.flatnonzero(wl >= 0)
        if sel.size:
            wc = model._well_cells[sel]
            wloc = np.searchsorted(needed, wc)
            dd = p[wc] - model._well_bhp[sel]
            open_ = dd > 0
            dd = np.where(open_, dd, 0.0)
            wi = model._well_wi[sel]
            np.add.at(res, wl[sel], (wi * dd)[:, None] * mob[wloc])
            np.add.at(shift, wl[sel], (wi * dd)[:, None] * mob_shift[wloc])
            dw = (wi * dd)[:, None, None] * dmob_eff[wloc]
            dw[:, :, 0] += np.where(open_, wi, 0.0)[:, None] * mob[wloc]
            np.add.at(diag, wl[sel], dw)

    # off-diagonal blocks, both ends in the target
    both = ra & rb
    off_r = np.concatenate([la[both], lb[both]])
    off_c = np.concatenate([lb[both], la[both]])
    off_b = np.concatenate([d_b[both], -d_a[both]])
    blk_r = np.concatenate([np.arange(k), off_r])
    blk_c = np.concatenate([np.arange(k), off_c])
    blocks = np.concatenate([diag, off_b])
    bi, bj = np.meshgrid(np.arange(nc), np.arange(nc), indexing="ij")
    rr = (blk_r[:, None, None] * nc + bi[None]).ravel()
    cc = (blk_c[:, None, None] * nc + bj[None]).ravel()
    jac = sp.csr_matrix((blocks.ravel(), (rr, cc)), shape=(k * nc, k * nc))
    jac.sort_indices()
    if not np.all(np.isfinite(jac.data)) or not np.all(np.isfinite(res)):
        raise AssemblyError("non-finite entries in the assembled system")
    return ReducedSystem(cells=cells, residual=res, rhs=(res + shift).ravel(), jac=jac,
                         T=T_t, t=t_t, block=nc)


def apply_update(state: FieldState, system: ReducedSystem, du: np.ndarray) -> np.ndarray:
    """Extend a reduced update into ``state`` in place; returns the full ``dw`` rows."""
    k, nc = system.cells.size, system.block
    dw = np.einsum("kwu,ku->kw", system.T, du.reshape(k, nc)) + system.t
    c = system.cells
    state.p[c] += dw[:, 0]
    state.sg[c] += dw[:, 1]
    state.x[c] += dw[:, 2:2 + nc]
    state.y[c] += dw[:, 2 + nc:]
    return dw


def well_molar_rates(model: FlowModel, state: FieldState) -> np.ndarray:
    """Component production rates (mol/s) per well, shape ``(n_wells, nc)``."""
    out = np.zeros((len(model.wells), model.nc))
    for k, w in enumerate(model.wells):
        rate, _ = well_term(model, state, w)
        out[k] = rate.sum(axis=0)
    return out
