"""Direct sparse solves for the Newton systems."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import LinearSolverError

logger = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-9


@dataclass
class LinearSolveReport:
    method: str
    residual_norm: float
    relative_residual: float
    factor_time: float
    solve_time: float
    refinements: int = 0


def _singular_cell(J: sp.csr_matrix, block: int) -> int:
    """Cell of the first structurally empty row or column, or -1."""
    row_nnz = np.diff(J.indptr)
    zero_rows = np.flatnonzero((row_nnz == 0) | (np.abs(J).max(axis=1).toarray().ravel() == 0))
    if zero_rows.size:
        return int(zero_rows[0] // block)
    col_max = np.abs(J).max(axis=0).toarray().ravel()
    zero_cols = np.flatnonzero(col_max == 0)
    if zero_cols.size:
        return int(zero_cols[0] // block)
    return -1


def solve(J, F, block: int = 1, cells=None, return_report: bool = False):
    """Solve ``J du = -F`` with a row-equilibrated sparse LU.

    ``cells`` maps local block rows back to global cell indices for error
    messages.  With ``D`` the row equilibration, one step of iterative
    refinement is applied when ``||D (J du + F)||_inf <= 1e-9 ||D F||_inf``
    fails.
    """
    J = sp.csr_matrix(J, dtype=float)
    F = np.asarray(F, dtype=float).ravel()
    n = J.shape[0]
    if J.shape != (n, n) or F.size != n:
        raise ValueError(f"dimension mismatch: J {J.shape}, F {F.size}")

    def global_cell(c):
        return int(cells[c]) if cells is not None and c >= 0 else c

    bad = _singular_cell(J, block)
    if bad >= 0:
        raise LinearSolverError(f"structurally singular system at cell {global_cell(bad)}",
                                cell=global_cell(bad))
    if n == 0 or not np.any(F):
        du = np.zeros(n)
        rep = LinearSolveReport("splu", 0.0, 0.0, 0.0, 0.0)
        return (du, rep) if return_report else du

    scale = 1.0 / np.asarray(np.abs(J).max(axis=1).toarray()).ravel()
    Js = sp.diags(scale) @ J
    t0 = time.perf_counter()
    try:
        lu = spla.splu(Js.tocsc(), permc_spec="COLAMD")
    except RuntimeError as exc:
        diag = np.abs(Js.diagonal())
        cell = int(np.argmin(diag)) // block
        raise LinearSolverError(f"singular factorization near cell {global_cell(cell)}: {exc}",
                                cell=global_cell(cell)) from exc
    t1 = time.perf_counter()
    rhs = -scale * F
    fnorm = float(np.max(np.abs(rhs)))
    du = lu.solve(rhs)
    refinements = 0
    r = scale * (J @ du + F)
    rnorm = float(np.max(np.abs(r)))
    if not np.isfinite(rnorm):
        raise LinearSolverError("non-finite solution from the factorization")
    if rnorm > RESIDUAL_TOL * fnorm:
        du = du - lu.solve(r)
        refinements = 1
        r = scale * (J @ du + F)
        rnorm = float(np.max(np.abs(r)))
        if rnorm > RESIDUAL_TOL * fnorm:
            logger.warning("linear residual %.3e above target after refinement", rnorm / fnorm)
    t2 = time.perf_counter()
    rep = LinearSolveReport("splu", rnorm, rnorm / fnorm, t1 - t0, t2 - t1, refinements)
    return (du, rep) if return_report else du
