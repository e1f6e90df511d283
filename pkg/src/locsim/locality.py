"""Index-set machinery for localized solves.

Index sets are plain sorted, duplicate-free ``np.intp`` arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import ConnectivityGraph, neighbor_set

EXPAND = "expand"
SHRINK = "shrink"


def as_index_set(cells) -> np.ndarray:
    return np.unique(np.asarray(cells, dtype=np.intp).ravel())


def union(*sets) -> np.ndarray:
    parts = [np.asarray(s, dtype=np.intp).ravel() for s in sets]
    return np.unique(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.intp)


@dataclass(frozen=True)
class RestrictionOperator:
    """Boolean restriction ``R_A`` from all cells onto ``indices`` (kept implicit)."""
    indices: np.ndarray
    n: int
    block: int = 1

    def __post_init__(self):
        idx = as_index_set(self.indices)
        if idx.size and (idx[0] < 0 or idx[-1] >= self.n):
            raise IndexError("restriction indices out of range")
        object.__setattr__(self, "indices", idx)

    def _rows(self, idx):
        if self.block == 1:
            return idx
        return (idx[:, None] * self.block + np.arange(self.block)).ravel()

    def restrict(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v)[self._rows(self.indices)]

    def extend(self, v_a: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n * self.block, dtype=np.result_type(v_a, float))
        out[self._rows(self.indices)] = v_a
        return out

    def extend_complement(self, v: np.ndarray) -> np.ndarray:
        out = np.array(v, dtype=float, copy=True)
        out[self._rows(self.indices)] = 0.0
        return out


def support_set(du, eps: float, cells=None) -> np.ndarray:
    """Cells with ``|du| >= eps``.

    ``du`` is either a full-field vector or, when ``cells`` is given, a
    vector aligned with ``cells``.
    """
    if eps <= 0:
        raise ValueError("cutoff must be positive")
    du = np.asarray(du, dtype=float)
    hit = np.flatnonzero(np.abs(du) >= eps)
    if cells is None:
        return hit.astype(np.intp)
    return np.asarray(cells, dtype=np.intp)[hit]


def boundary_layer(active, graph: ConnectivityGraph) -> np.ndarray:
    """Cells of ``active`` with at least one neighbour outside it."""
    active = as_index_set(active)
    inside = np.zeros(graph.n_cells, dtype=bool)
    inside[active] = True
    owner, nbr, _ = graph.gather(active)
    return np.unique(owner[~inside[nbr]])


def outer_halo(active, graph: ConnectivityGraph) -> np.ndarray:
    """Cells outside ``active`` adjacent to at least one of its cells."""
    active = as_index_set(active)
    inside = np.zeros(graph.n_cells, dtype=bool)
    inside[active] = True
    _, nbr, _ = graph.gather(active)
    return np.unique(nbr[~inside[nbr]])


def expand_active(active, boundary, du, eps: float, m: int, graph: ConnectivityGraph):
    """Grow ``active`` by the ``m``-layer neighbourhoods of flagged boundary cells.

    ``du`` is a full-field update vector.  Returns ``(new_active, expanding)``
    where ``expanding`` tells whether any boundary update reached ``eps``.
    """
    boundary = as_index_set(boundary)
    du = np.asarray(du, dtype=float)
    flagged = boundary[np.abs(du[boundary]) >= eps]
    if flagged.size == 0:
        return as_index_set(active), False
    return union(active, neighbor_set(graph, flagged, m)), True


def subdomain_skip_check(du_prev, du_halo, eps: float) -> bool:
    """True when a subdomain has to be solved (either norm at or above ``eps``).

    ``du_prev`` is None on the first sweep, which always solves.
    """
    if du_prev is None:
        return True
    a = float(np.max(np.abs(du_prev))) if np.size(du_prev) else 0.0
    b = float(np.max(np.abs(du_halo))) if np.size(du_halo) else 0.0
    return a >= eps or b >= eps


@dataclass
class ActiveSetState:
    active: np.ndarray
    boundary: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    halo: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    total: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    mode: str = EXPAND

    @classmethod
    def build(cls, active, graph: ConnectivityGraph, mode: str = EXPAND) -> "ActiveSetState":
        a = as_index_set(active)
        return cls(a, boundary_layer(a, graph), outer_halo(a, graph), a.copy(), mode)


def flag_map(n: int, active, boundary, dp, eps: float) -> np.ndarray:
    """Integer category per cell: 0 inactive, 1 active, 2 boundary, 3 active with
    update, 4 boundary with update (update means ``|dp| >= eps``)."""
    out = np.zeros(n, dtype=np.int8)
    active = np.asarray(active, dtype=np.intp)
    boundary = np.asarray(boundary, dtype=np.intp)
    big = np.abs(np.asarray(dp)) >= eps
    out[active] = np.where(big[active], 3, 1)
    out[boundary] = np.where(big[boundary], 4, 2)
    return out
