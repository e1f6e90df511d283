"""Nonlinear solvers for one backward-Euler timestep.

All three solvers share the same local step: assemble over a cell set,
solve, extend the update, then run phase switching on the updated cells.
Convergence is declared when the pressure update is below ``eps_p`` and
no cell is unsettled: a cell is unsettled when it changed phase status,
had its update chopped, or moved its gas saturation by ``eps_sg`` or more.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .assembly import FlowModel, apply_update, assemble, old_accumulation
from .errors import ConvergenceFailure, NumericalError
from .grid import neighbor_set
from .linsolve import solve
from .locality import (EXPAND, SHRINK, as_index_set, boundary_layer, flag_map, outer_halo,
                       subdomain_skip_check, support_set, union)
from .state import FieldState

logger = logging.getLogger(__name__)

PSI = 6894.757293168
MAX_NEWTON = 25
MAX_OUTER = 50


@dataclass
class NewtonReport:
    iterations: int = 0
    n_active: list = field(default_factory=list)
    dp_norms: list = field(default_factory=list)
    converged: bool = False
    modes: list = field(default_factory=list)
    supports: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    outer_iterations: int = 0
    subdomains: list = field(default_factory=list)
    n_cells: int = 0
    touched: np.ndarray | None = None

    @property
    def ratio_total(self) -> float:
        return float(np.sum(self.n_active) / self.n_cells) if self.n_cells else 0.0


@dataclass
class SolverOptions:
    eps_p: float = 0.3 * PSI
    eps_set: float | None = None
    m: int = 2
    max_iter: int = MAX_NEWTON
    max_outer: int = MAX_OUTER
    trace: bool = False
    record_supports: bool = False
    max_dsg: float = 0.2
    eps_sg: float = 0.01

    @property
    def eps(self) -> float:
        return self.eps_set if self.eps_set is not None else self.eps_p


class _Step:
    """One Newton update over a cell set, with phase switching afterwards."""

    def __init__(self, model: FlowModel, state_old: FieldState, dt: float, opts: SolverOptions):
        self.model = model
        self.dt = dt
        self.opts = opts
        self.acc_old = old_accumulation(model, state_old)
        self.n = model.n_cells

    def __call__(self, state: FieldState, cells):
        """Returns the full-length pressure update, the unsettled cells and the
        solved cells."""
        sys = assemble(self.model, state, self.acc_old, self.dt, cells)
        du = solve(sys.jac, sys.rhs, block=sys.block, cells=sys.cells)
        if not np.all(np.isfinite(du)):
            raise NumericalError("non-finite Newton update")
        du, chopped = _chop(sys, du, self.opts.max_dsg, self.model.nc)
        dw = apply_update(state, sys, du)
        changed = self.model.fluid.substitute(state, sys.cells)
        dp = np.zeros(self.n)
        dp[sys.cells] = dw[:, 0]
        moving = sys.cells[np.abs(dw[:, 1]) >= self.opts.eps_sg]
        if chopped.size or moving.size:
            changed = union(changed, chopped, moving)
        return dp, changed, sys.cells


def _chop(sys, du, max_dsg: float, nc: int):
    """Scale a cell's update when its gas saturation change exceeds ``max_dsg``.

    Returns the update and the global indices of the chopped cells.
    """
    none = np.zeros(0, dtype=np.intp)
    if nc < 2 or max_dsg <= 0:
        return du, none
    k = sys.cells.size
    d = du.reshape(k, nc)
    dsg = np.einsum("ku,ku->k", sys.T[:, 1, :], d) + sys.t[:, 1]
    big = np.abs(dsg) > max_dsg
    if not big.any():
        return du, none
    f = np.ones(k)
    f[big] = max_dsg / np.abs(dsg[big])
    # pressure rides along unscaled so all solvers share the same pressure path
    d = d.copy()
    d[big, 1:] *= f[big, None]
    return d.ravel(), sys.cells[big]


def _converged(dp_max: float, changed, eps_p: float) -> bool:
    return dp_max < eps_p and np.size(changed) == 0


def newton_standard(model: FlowModel, state: FieldState, state_old: FieldState, dt: float,
                    opts: SolverOptions | None = None):
    """Full-domain Newton.  ``state`` is updated in place; returns the report."""
    opts = opts or SolverOptions()
    step = _Step(model, state_old, dt, opts)
    n = model.n_cells
    rep = NewtonReport(n_cells=n)
    everything = np.arange(n, dtype=np.intp)
    rep.touched = np.ones(n, dtype=bool)
    for it in range(opts.max_iter):
        dp, changed, _ = step(state, None)
        dmax = float(np.max(np.abs(dp)))
        rep.iterations += 1
        rep.n_active.append(n)
        rep.dp_norms.append(dmax)
        rep.modes.append(SHRINK)
        if opts.record_supports:
            rep.supports.append(support_set(dp, opts.eps))
        if opts.trace:
            rep.flags.append(flag_map(n, everything, np.zeros(0, dtype=np.intp), dp, opts.eps))
        if _converged(dmax, changed, opts.eps_p):
            rep.converged = True
            rep.outer_iterations = rep.iterations
            return rep
    raise ConvergenceFailure(f"standard Newton did not converge in {opts.max_iter} iterations", rep)


def _boundary_measure(state: FieldState, dp, sync):
    """Update magnitude used to flag boundary cells.

    Without ``sync`` this is the latest Newton update.  With ``sync`` (a
    per-cell pressure recorded the last time the cell was solved together
    with all of its neighbours) it is the drift accumulated since then,
    which also catches slow changes that stay below the cutoff in every
    single iteration.
    """
    if sync is None:
        return np.abs(dp)
    return np.abs(state.p - sync)


def _mark_synced(sync, state: FieldState, cells, boundary):
    if sync is None:
        return
    inner = np.setdiff1d(cells, boundary, assume_unique=True)
    sync[inner] = state.p[inner]


def newton_localized(model: FlowModel, state: FieldState, state_old: FieldState, dt: float,
                     active_init, opts: SolverOptions | None = None, sync=None):
    """Localized Newton: solve only on an adaptively grown, then shrunk, active set.

    Fracture cells are always active.  Once the boundary layer stops
    carrying significant updates the set switches to the support of the
    latest update and never grows again within the timestep.  ``sync``
    enables drift-based boundary flagging (see :func:`_boundary_measure`);
    it is updated in place.
    """
    opts = opts or SolverOptions()
    g = model.graph
    n = model.n_cells
    eps = opts.eps
    always = union(g.fracture_cells, model.well_cells())
    active = union(active_init, always)
    step = _Step(model, state_old, dt, opts)
    rep = NewtonReport(n_cells=n)
    touched = np.zeros(n, dtype=bool)
    mode = EXPAND
    for it in range(opts.max_iter):
        boundary = boundary_layer(active, g)
        touched[active] = True
        rep.touched = touched
        dp, changed, _ = step(state, active)
        dmax = float(np.max(np.abs(dp[active])))
        rep.iterations += 1
        rep.n_active.append(active.size)
        rep.dp_norms.append(dmax)
        rep.modes.append(mode)
        if opts.trace:
            rep.flags.append(flag_map(n, active, boundary, dp, eps))
        _mark_synced(sync, state, active, boundary)
        if mode == EXPAND:
            flagged = boundary[_boundary_measure(state, dp, sync)[boundary] >= eps]
            if flagged.size:
                active = union(active, neighbor_set(g, flagged, opts.m))
            else:
                mode = SHRINK
        if mode == SHRINK:
            if _converged(dmax, changed, opts.eps_p):
                rep.converged = True
                rep.outer_iterations = rep.iterations
                return rep
            active = union(support_set(dp, eps), always, changed)
    raise ConvergenceFailure(f"localized Newton did not converge in {opts.max_iter} iterations", rep)


def adaptive_nonlinear_dd(model: FlowModel, state: FieldState, state_old: FieldState, dt: float,
                          active_init, opts: SolverOptions | None = None, sync=None):
    """Adaptive nonlinear domain decomposition (multiplicative Schwarz).

    Phase 1 takes one local Newton step per freshly added ring, recording
    each ring as a subdomain.  Phase 2 sweeps the subdomains in order,
    re-solving one only if its last update or its halo change since that
    solve reaches ``eps``.
    """
    opts = opts or SolverOptions()
    g = model.graph
    n = model.n_cells
    eps = opts.eps
    step = _Step(model, state_old, dt, opts)
    rep = NewtonReport(n_cells=n)
    always = union(g.fracture_cells, model.well_cells())

    sub = union(active_init, always)
    total = sub.copy()
    in_total = np.zeros(n, dtype=bool)
    in_total[total] = True
    boundary = boundary_layer(sub, g)
    subdomains, last_dp, halo_snap, pending = [], [], [], []

    def local(cells, bnd):
        dp, changed, _ = step(state, cells)
        rep.iterations += 1
        rep.n_active.append(cells.size)
        dmax = float(np.max(np.abs(dp[cells])))
        rep.dp_norms.append(dmax)
        if opts.trace:
            rep.flags.append(flag_map(n, cells, bnd, dp, eps))
        return dp, dmax, changed

    # phase 1: expansion
    while True:
        if rep.iterations >= opts.max_outer * 4:
            raise ConvergenceFailure("adaptive DD expansion did not terminate", rep)
        dp, dmax, changed = local(sub, boundary)
        _mark_synced(sync, state, sub, boundary_layer(sub, g))
        rep.modes.append(EXPAND)
        subdomains.append(sub)
        last_dp.append(dmax)
        pending.append(np.size(changed) > 0)
        flagged = boundary[_boundary_measure(state, dp, sync)[boundary] >= eps]
        fresh = np.zeros(0, dtype=np.intp)
        if flagged.size:
            nbr = neighbor_set(g, flagged, opts.m)
            fresh = nbr[~in_total[nbr]]
        if fresh.size == 0:
            break
        in_total[fresh] = True
        total = np.flatnonzero(in_total)
        boundary = np.intersect1d(boundary_layer(total, g), fresh, assume_unique=True)
        sub = fresh

    rep.touched = in_total
    halos = [outer_halo(s, g) for s in subdomains]
    for k, s in enumerate(subdomains):
        halo_snap.append(state.p[halos[k]].copy())
    _check_partition(subdomains, total)
    rep.subdomains = [s.size for s in subdomains]
    rep.outer_iterations = 1

    # phase 2: multiplicative Schwarz sweeps
    first = len(subdomains) > 1
    for sweep in range(opts.max_outer):
        solved = False
        for k, s in enumerate(subdomains):
            halo_change = state.p[halos[k]] - halo_snap[k]
            need = first or pending[k] or subdomain_skip_check(
                np.array([last_dp[k]]), halo_change, eps) or last_dp[k] >= opts.eps_p
            if not need:
                continue
            bnd = boundary_layer(s, g)
            dp, dmax, changed = local(s, bnd)
            _mark_synced(sync, state, s, bnd)
            rep.modes.append(SHRINK)
            last_dp[k] = dmax
            pending[k] = np.size(changed) > 0
            halo_snap[k] = state.p[halos[k]].copy()
            solved = True
        first = False
        if not solved:
            rep.converged = True
            return rep
        rep.outer_iterations += 1
    raise ConvergenceFailure(f"adaptive DD did not converge in {opts.max_outer} sweeps", rep)


def _check_partition(subdomains, total):
    sizes = sum(s.size for s in subdomains)
    allc = np.concatenate(subdomains)
    if sizes != total.size or np.unique(allc).size != sizes:
        raise AssertionError("subdomains do not partition the total active set")


SOLVERS = {
    "standard": newton_standard,
    "localized": newton_localized,
    "adaptive_dd": adaptive_nonlinear_dd,
}
