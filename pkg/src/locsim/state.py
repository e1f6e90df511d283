"""Field-wide natural-variable state."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fluid import CellState, PhaseStatus


@dataclass
class FieldState:
    """Natural variables for every cell.

    ``status`` holds :class:`PhaseStatus` codes; ``x`` and ``y`` are
    ``(n, nc)``.  In single-phase cells both compositions equal the overall
    composition.
    """
    p: np.ndarray
    sg: np.ndarray
    x: np.ndarray
    y: np.ndarray
    status: np.ndarray

    @property
    def n(self) -> int:
        return self.p.size

    @property
    def nc(self) -> int:
        return self.x.shape[1]

    def copy(self) -> "FieldState":
        return FieldState(self.p.copy(), self.sg.copy(), self.x.copy(),
                          self.y.copy(), self.status.copy())

    def cell(self, i: int) -> CellState:
        return CellState(p=float(self.p[i]), s_o=float(1.0 - self.sg[i]), s_g=float(self.sg[i]),
                         x=self.x[i].copy(), y=self.y[i].copy(),
                         status=PhaseStatus(int(self.status[i])))

    def assign(self, other: "FieldState", cells) -> None:
        """Copy ``cells`` from ``other`` into this state."""
        self.p[cells] = other.p[cells]
        self.sg[cells] = other.sg[cells]
        self.x[cells] = other.x[cells]
        self.y[cells] = other.y[cells]
        self.status[cells] = other.status[cells]

    def overall_composition(self, rho_o, rho_g) -> np.ndarray:
        mo = rho_o * (1.0 - self.sg)
        mg = rho_g * self.sg
        return (mo[:, None] * self.x + mg[:, None] * self.y) / (mo + mg)[:, None]

    def equals(self, other: "FieldState", cells=None) -> bool:
        sl = slice(None) if cells is None else cells
        return (np.array_equal(self.p[sl], other.p[sl])
                and np.array_equal(self.sg[sl], other.sg[sl])
                and np.array_equal(self.x[sl], other.x[sl])
                and np.array_equal(self.y[sl], other.y[sl])
                and np.array_equal(self.status[sl], other.status[sl]))


def uniform_state(n: int, p: float, z) -> FieldState:
    """Single-phase oil everywhere at pressure ``p`` and overall composition ``z``."""
    z = np.asarray(z, dtype=float)
    comp = np.tile(z / z.sum(), (n, 1))
    return FieldState(p=np.full(n, float(p)), sg=np.zeros(n), x=comp, y=comp.copy(),
                      status=np.zeros(n, dtype=np.int8))
