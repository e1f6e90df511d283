"""Structured matrix grid, embedded fracture cells and the unified cell graph.

Matrix cells are numbered ``i = iy * nx + ix``.  Fracture cells (one per
segment piece inside a matrix cell) are appended after the matrix cells.
All connections are stored once with ``i < j``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigurationError

logger = logging.getLogger(__name__)

MATRIX = 0
FRACTURE = 1

# midpoint quadrature resolution for the average matrix-fracture distance
_QUAD_N = 8


@dataclass(frozen=True)
class StructuredGrid:
    nx: int
    ny: int
    dx: float
    dy: float
    thickness: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ConfigurationError(f"grid needs nx, ny >= 1, got {self.nx}x{self.ny}")
        if not (self.dx > 0 and self.dy > 0 and self.thickness > 0):
            raise ConfigurationError("grid cell sizes and thickness must be positive")

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def extent(self) -> tuple[float, float, float, float]:
        x0, y0 = self.origin
        return x0, x0 + self.nx * self.dx, y0, y0 + self.ny * self.dy

    def cell_index(self, ix, iy):
        return np.asarray(iy) * self.nx + np.asarray(ix)

    def cell_ij(self, i):
        i = np.asarray(i)
        return i % self.nx, i // self.nx

    def cell_center(self, i):
        ix, iy = self.cell_ij(i)
        x0, y0 = self.origin
        return x0 + (ix + 0.5) * self.dx, y0 + (iy + 0.5) * self.dy

    def locate(self, x, y):
        """Matrix cell containing point (x, y); points on the far edge go to the last cell."""
        x0, y0 = self.origin
        ix = np.clip(np.floor((np.asarray(x) - x0) / self.dx).astype(int), 0, self.nx - 1)
        iy = np.clip(np.floor((np.asarray(y) - y0) / self.dy).astype(int), 0, self.ny - 1)
        return self.cell_index(ix, iy)


@dataclass(frozen=True)
class FractureSegment:
    p0: tuple[float, float]
    p1: tuple[float, float]
    aperture: float = 1e-3
    permeability: float = 1e-10

    def __post_init__(self):
        if np.allclose(self.p0, self.p1, rtol=0, atol=0):
            raise ConfigurationError("fracture segment endpoints must be distinct")
        if not (self.aperture > 0 and self.permeability > 0):
            raise ConfigurationError("fracture aperture and permeability must be positive")

    @property
    def length(self) -> float:
        return float(np.hypot(self.p1[0] - self.p0[0], self.p1[1] - self.p0[1]))


@dataclass(frozen=True)
class FracturePiece:
    """Geometry of one fracture cell: a segment clipped to one matrix cell."""
    segment: int
    host: int
    t0: float
    t1: float
    length: float


@dataclass(frozen=True, eq=False)
class ConnectivityGraph:
    """Unified matrix + fracture cell graph with interface transmissibilities.

    ``conn_i``, ``conn_j`` and ``trans`` are parallel arrays with
    ``conn_i < conn_j``; transmissibilities are in m^3.
    """
    grid: StructuredGrid
    n_matrix: int
    n_fracture: int
    conn_i: np.ndarray
    conn_j: np.ndarray
    trans: np.ndarray
    cell_volumes: np.ndarray
    porosity: np.ndarray
    cell_kind: np.ndarray
    segments: tuple[FractureSegment, ...] = ()
    pieces: tuple[FracturePiece, ...] = field(default=(), repr=False)

    @property
    def n_cells(self) -> int:
        return self.n_matrix + self.n_fracture

    @property
    def n_connections(self) -> int:
        return len(self.trans)

    @cached_property
    def fracture_cells(self) -> np.ndarray:
        return np.flatnonzero(self.cell_kind == FRACTURE)

    @cached_property
    def _csr(self):
        n = self.n_cells
        rows = np.concatenate([self.conn_i, self.conn_j])
        cols = np.concatenate([self.conn_j, self.conn_i])
        cids = np.concatenate([np.arange(self.n_connections)] * 2)
        order = np.lexsort((cols, rows))
        indptr = np.zeros(n + 1, dtype=np.intp)
        np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
        return indptr, cols[order].astype(np.intp), cids[order].astype(np.intp)

    @property
    def indptr(self) -> np.ndarray:
        return self._csr[0]

    @property
    def neighbors_flat(self) -> np.ndarray:
        return self._csr[1]

    @property
    def conn_ids_flat(self) -> np.ndarray:
        return self._csr[2]

    def neighbors(self, i: int) -> np.ndarray:
        a, b = self.indptr[i], self.indptr[i + 1]
        return self.neighbors_flat[a:b]

    def gather(self, cells):
        """Adjacency entries of ``cells``: (owner cell, neighbor cell, connection id)."""
        cells = np.asarray(cells, dtype=np.intp)
        start = self.indptr[cells]
        deg = self.indptr[cells + 1] - start
        owner = np.repeat(cells, deg)
        offs = np.arange(deg.sum()) - np.repeat(np.cumsum(deg) - deg, deg)
        pos = np.repeat(start, deg) + offs
        return owner, self.neighbors_flat[pos], self.conn_ids_flat[pos]

    def transmissibility(self, i: int, j: int) -> float:
        a, b = self.indptr[i], self.indptr[i + 1]
        hit = np.flatnonzero(self.neighbors_flat[a:b] == j)
        if hit.size == 0:
            return 0.0
        return float(self.trans[self.conn_ids_flat[a + hit[0]]])


def _validate_positive(name, value):
    if np.any(np.asarray(value) <= 0):
        raise ConfigurationError(f"{name} must be positive")


def build_matrix_grid(spec: StructuredGrid, perm, poro) -> ConnectivityGraph:
    """TPFA face connections of the structured matrix grid.

    ``perm`` and ``poro`` may be scalars or arrays of length ``nx * ny``.
    The face transmissibility is the harmonic mean of the two half
    transmissibilities ``k * A / (d / 2)``.
    """
    _validate_positive("permeability", perm)
    _validate_positive("porosity", poro)
    n = spec.n_cells
    k = np.broadcast_to(np.asarray(perm, dtype=float), (n,))
    phi = np.broadcast_to(np.asarray(poro, dtype=float), (n,)).copy()
    idx = np.arange(n).reshape(spec.ny, spec.nx)

    ax = spec.dy * spec.thickness
    ay = spec.dx * spec.thickness
    ci, cj, tr = [], [], []
    # x faces
    left, right = idx[:, :-1].ravel(), idx[:, 1:].ravel()
    th_l = k[left] * ax / (0.5 * spec.dx)
    th_r = k[right] * ax / (0.5 * spec.dx)
    ci.append(left)
    cj.append(right)
    tr.append(th_l * th_r / (th_l + th_r))
    # y faces
    low, up = idx[:-1, :].ravel(), idx[1:, :].ravel()
    th_l = k[low] * ay / (0.5 * spec.dy)
    th_u = k[up] * ay / (0.5 * spec.dy)
    ci.append(low)
    cj.append(up)
    tr.append(th_l * th_u / (th_l + th_u))

    conn_i = np.concatenate(ci).astype(np.intp)
    conn_j = np.concatenate(cj).astype(np.intp)
    trans = np.concatenate(tr)
    order = np.lexsort((conn_j, conn_i))
    return ConnectivityGraph(
        grid=spec,
        n_matrix=n,
        n_fracture=0,
        conn_i=conn_i[order],
        conn_j=conn_j[order],
        trans=trans[order],
        cell_volumes=np.full(n, spec.dx * spec.dy * spec.thickness),
        porosity=phi,
        cell_kind=np.zeros(n, dtype=np.int8),
    )


def average_distance_to_line(grid: StructuredGrid, cell: int, p0, p1, nq: int = _QUAD_N) -> float:
    """Mean normal distance from the points of a matrix cell to the line p0-p1."""
    cx, cy = grid.cell_center(cell)
    s = (np.arange(nq) + 0.5) / nq - 0.5
    qx, qy = np.meshgrid(cx + s * grid.dx, cy + s * grid.dy)
    tx, ty = p1[0] - p0[0], p1[1] - p0[1]
    norm = np.hypot(tx, ty)
    d = np.abs((qx - p0[0]) * ty - (qy - p0[1]) * tx) / norm
    return float(d.mean())


def segment_pieces(grid: StructuredGrid, seg: FractureSegment, seg_id: int = 0) -> list[FracturePiece]:
    """Walk a segment through the grid; one piece per crossed matrix cell."""
    x0, x1, y0, y1 = grid.extent
    tol = 1e-9 * max(x1 - x0, y1 - y0)
    for px, py in (seg.p0, seg.p1):
        if not (x0 - tol <= px <= x1 + tol and y0 - tol <= py <= y1 + tol):
            raise ConfigurationError(f"fracture endpoint ({px}, {py}) outside the grid")

    (ax, ay), (bx, by) = seg.p0, seg.p1
    dx, dy = bx - ax, by - ay
    ts = [np.array([0.0, 1.0])]
    if dx != 0.0:
        lines = grid.origin[0] + grid.dx * np.arange(grid.nx + 1)
        ts.append((lines - ax) / dx)
    if dy != 0.0:
        lines = grid.origin[1] + grid.dy * np.arange(grid.ny + 1)
        ts.append((lines - ay) / dy)
    t = np.unique(np.concatenate(ts))
    t = t[(t >= 0.0) & (t <= 1.0)]

    length = seg.length
    pieces: list[FracturePiece] = []
    for ta, tb in zip(t[:-1], t[1:]):
        plen = (tb - ta) * length
        if plen <= 1e-12 * length:
            logger.warning("skipping zero-length fracture piece on segment %d", seg_id)
            continue
        tm = 0.5 * (ta + tb)
        host = int(grid.locate(ax + tm * dx, ay + tm * dy))
        if pieces and pieces[-1].host == host:
            prev = pieces[-1]
            pieces[-1] = FracturePiece(seg_id, host, prev.t0, tb, prev.length + plen)
        else:
            pieces.append(FracturePiece(seg_id, host, ta, tb, plen))
    return pieces


def _segment_intersection(s: FractureSegment, r: FractureSegment):
    """Parameters (t_s, t_r) of the crossing point, or None."""
    p = np.asarray(s.p0, float)
    d1 = np.asarray(s.p1, float) - p
    q = np.asarray(r.p0, float)
    d2 = np.asarray(r.p1, float) - q
    den = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(den) <= 1e-14 * np.hypot(*d1) * np.hypot(*d2):
        return None
    w = q - p
    ts = (w[0] * d2[1] - w[1] * d2[0]) / den
    tr = (w[0] * d1[1] - w[1] * d1[0]) / den
    eps = 1e-12
    if -eps <= ts <= 1 + eps and -eps <= tr <= 1 + eps:
        return float(np.clip(ts, 0, 1)), float(np.clip(tr, 0, 1))
    return None


def _piece_at(pieces: list[FracturePiece], offset: int, t: float):
    for k, pc in enumerate(pieces):
        if pc.t0 <= t <= pc.t1:
            return offset + k, pc
    return None, None


def discretize_fractures(graph: ConnectivityGraph, segments, fracture_porosity: float = 1.0,
                         matrix_perm=None) -> ConnectivityGraph:
    """Append EDFM fracture cells and their connections to a matrix graph.

    Matrix-fracture transmissibility blends the matrix half term
    ``k_m A_f / <d>`` with the fracture half term ``k_f A_f / (w/2)``
    harmonically, where ``A_f = 2 L h`` counts both fracture faces.
    Crossing segments are joined directly at the intersection point.
    """
    if graph.n_fracture:
        raise ConfigurationError("graph already contains fracture cells")
    grid = graph.grid
    h = grid.thickness
    segments = tuple(segments)
    if matrix_perm is None:
        # recover the matrix permeability from a face transmissibility
        matrix_perm = _matrix_perm_from_graph(graph)
    km = np.broadcast_to(np.asarray(matrix_perm, dtype=float), (graph.n_matrix,))

    all_pieces: list[FracturePiece] = []
    seg_pieces: list[list[FracturePiece]] = []
    seg_offset: list[int] = []
    for sid, seg in enumerate(segments):
        pcs = segment_pieces(grid, seg, sid)
        seg_offset.append(graph.n_matrix + len(all_pieces))
        seg_pieces.append(pcs)
        all_pieces.extend(pcs)

    nf = len(all_pieces)
    n0 = graph.n_matrix
    vols = np.empty(nf)
    ci, cj, tr = [graph.conn_i], [graph.conn_j], [graph.trans]
    new_i, new_j, new_t = [], [], []

    for sid, (seg, pcs) in enumerate(zip(segments, seg_pieces)):
        off = seg_offset[sid]
        kf, w = seg.permeability, seg.aperture
        for k, pc in enumerate(pcs):
            f = off + k
            vols[f - n0] = pc.length * w * h
            area = 2.0 * pc.length * h
            dist = average_distance_to_line(grid, pc.host, seg.p0, seg.p1)
            t_m = km[pc.host] * area / dist
            t_f = kf * area / (0.5 * w)
            new_i.append(pc.host)
            new_j.append(f)
            new_t.append(t_m * t_f / (t_m + t_f))
            if k > 0:
                prev = pcs[k - 1]
                ta = kf * w * h / (0.5 * prev.length)
                tb = kf * w * h / (0.5 * pc.length)
                new_i.append(f - 1)
                new_j.append(f)
                new_t.append(ta * tb / (ta + tb))

    for a in range(len(segments)):
        for b in range(a + 1, len(segments)):
            hit = _segment_intersection(segments[a], segments[b])
            if hit is None:
                continue
            fa, pa = _piece_at(seg_pieces[a], seg_offset[a], hit[0])
            fb, pb = _piece_at(seg_pieces[b], seg_offset[b], hit[1])
            if fa is None or fb is None:
                continue
            half = []
            for seg, pc, t in ((segments[a], pa, hit[0]), (segments[b], pb, hit[1])):
                la = (t - pc.t0) * seg.length
                lb = (pc.t1 - t) * seg.length
                d = (la * la + lb * lb) / (2.0 * (la + lb))
                half.append(seg.permeability * seg.aperture * h / d)
            new_i.append(min(fa, fb))
            new_j.append(max(fa, fb))
            new_t.append(half[0] * half[1] / (half[0] + half[1]))

    ci.append(np.asarray(new_i, dtype=np.intp))
    cj.append(np.asarray(new_j, dtype=np.intp))
    tr.append(np.asarray(new_t, dtype=float))
    conn_i = np.concatenate(ci)
    conn_j = np.concatenate(cj)
    trans = np.concatenate(tr)
    lo, hi = np.minimum(conn_i, conn_j), np.maximum(conn_i, conn_j)
    order = np.lexsort((hi, lo))
    lo, hi, trans = lo[order], hi[order], trans[order]
    dup = (np.diff(lo) == 0) & (np.diff(hi) == 0)
    if dup.any():
        # two pieces sharing a host and an intersection: merge in parallel
        keep = np.concatenate([[True], ~dup])
        groups = np.cumsum(keep) - 1
        trans = np.bincount(groups, weights=trans)
        lo, hi = lo[keep], hi[keep]

    return ConnectivityGraph(
        grid=grid,
        n_matrix=n0,
        n_fracture=nf,
        conn_i=lo,
        conn_j=hi,
        trans=trans,
        cell_volumes=np.concatenate([graph.cell_volumes, vols]),
        porosity=np.concatenate([graph.porosity, np.full(nf, fracture_porosity)]),
        cell_kind=np.concatenate([graph.cell_kind, np.full(nf, FRACTURE, dtype=np.int8)]),
        segments=segments,
        pieces=tuple(all_pieces),
    )


def _matrix_perm_from_graph(graph: ConnectivityGraph) -> float:
    g = graph.grid
    if graph.n_connections == 0:
        raise ConfigurationError("matrix permeability required for a single-cell grid")
    i, j, t = graph.conn_i[0], graph.conn_j[0], graph.trans[0]
    if j - i == 1:
        area, d = g.dy * g.thickness, g.dx
    else:
        area, d = g.dx * g.thickness, g.dy
    return float(t * d / area)


def neighbor_set(graph: ConnectivityGraph, i, m: int) -> np.ndarray:
    """Cells within graph distance ``m`` of ``i`` (``i`` may be several seeds)."""
    if m < 0:
        raise ValueError("layer count must be non-negative")
    seeds = np.unique(np.atleast_1d(np.asarray(i, dtype=np.intp)))
    seen = np.zeros(graph.n_cells, dtype=bool)
    seen[seeds] = True
    frontier = seeds
    for _ in range(m):
        if frontier.size == 0:
            break
        _, nb, _ = graph.gather(frontier)
        nb = np.unique(nb[~seen[nb]])
        seen[nb] = True
        frontier = nb
    return np.flatnonzero(seen)
