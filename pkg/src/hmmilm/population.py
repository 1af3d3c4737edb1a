"""Population geometry and neighborhood structure.

Neighborhoods are stored in CSR form (indptr/indices) with one distance
and one queen order per edge, so distance kernels and the
neighborhood-order kernel share a single adjacency structure.  A reverse
index (all j with i in NE(j)) is precomputed because the filter's
forward products iterate it in the inner loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError


def build_grid(rows: int, cols: int, row_spacing_m: float, within_row_spacing_m: float) -> np.ndarray:
    """Rectangular lattice coordinates in meters, row-major ids.

    `row_spacing_m` separates rows (y axis); `within_row_spacing_m`
    separates plants within a row (x axis).
    """
    if rows < 1 or cols < 1:
        raise InputError("grid dimensions must be >= 1")
    if row_spacing_m <= 0 or within_row_spacing_m <= 0:
        raise InputError("grid spacings must be positive")
    r, c = np.divmod(np.arange(rows * cols), cols)
    return np.column_stack((c * within_row_spacing_m, r * row_spacing_m)).astype(float)


def queen_neighbors(rows: int, cols: int, order: int):
    """Queen neighborhoods up to `order` on a rows x cols grid.

    Returns (neighbors, orders): lists with one int array per cell.  A
    cell's k-th order neighbors are the cells whose row and column
    offsets are both at most k in absolute value (excluding the cell),
    with the order of a neighbor = max(|row offset|, |col offset|).
    Neighbor ids are sorted ascending.
    """
    if order < 1:
        raise InputError("neighborhood order must be >= 1")
    offsets = []
    for dr in range(-order, order + 1):
        for dc in range(-order, order + 1):
            if dr == 0 and dc == 0:
                continue
            offsets.append((dr, dc, max(abs(dr), abs(dc))))
    neighbors, orders = [], []
    for r in range(rows):
        for c in range(cols):
            ids, ords = [], []
            for dr, dc, k in offsets:
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    ids.append(rr * cols + cc)
                    ords.append(k)
            idx = np.argsort(ids, kind="stable")
            neighbors.append(np.asarray(ids, dtype=np.int32)[idx])
            orders.append(np.asarray(ords, dtype=np.int8)[idx])
    return neighbors, orders


def complete_graph(n: int):
    """Everyone neighbors everyone else."""
    if n < 1:
        raise InputError("population size must be >= 1")
    all_ids = np.arange(n, dtype=np.int32)
    return [np.delete(all_ids, i) for i in range(n)]


def reverse_index(neighbors):
    """Transpose of an adjacency: reverse[i] = sorted {j : i in NE(j)}."""
    n = len(neighbors)
    rev = [[] for _ in range(n)]
    for j, row in enumerate(neighbors):
        for i in row:
            if not 0 <= i < n:
                raise InputError(f"neighbor id {i} outside population")
            rev[int(i)].append(j)
    return [np.asarray(sorted(r), dtype=np.int32) for r in rev]


@dataclass
class Population:
    """Immutable population: ids, optional coordinates, adjacency.

    Attributes
    ----------
    indptr, indices : CSR adjacency, neighbor ids sorted within each row.
    edge_dist : distance in meters per edge (1.0 when no coordinates).
    edge_order : queen order per edge (0 when not a grid).
    rev_indptr, rev_indices : CSR of the transposed adjacency.
    rev_edge : for reverse entry (i <- j), the forward-edge index of i in
        NE(j)'s row, so per-edge values can be looked up either way.
    """

    n: int
    coords: np.ndarray | None
    indptr: np.ndarray
    indices: np.ndarray
    edge_dist: np.ndarray
    edge_order: np.ndarray
    rev_indptr: np.ndarray = field(init=False)
    rev_indices: np.ndarray = field(init=False)
    rev_edge: np.ndarray = field(init=False)

    def __post_init__(self):
        for i in range(self.n):
            row = self.indices[self.indptr[i]: self.indptr[i + 1]]
            if np.any(row == i):
                raise InputError(f"individual {i} cannot neighbor itself")
            if np.any(np.diff(row) <= 0):
                raise InputError(f"neighbor list of {i} must be sorted, unique")
        rev_ip, rev_ix, rev_e = _transpose_csr(self.n, self.indptr, self.indices)
        self.rev_indptr = rev_ip
        self.rev_indices = rev_ix
        self.rev_edge = rev_e

    # -- construction -----------------------------------------------------

    @staticmethod
    def from_neighbor_lists(neighbors, coords=None, orders=None) -> "Population":
        n = len(neighbors)
        indptr = np.zeros(n + 1, dtype=np.int64)
        for i, row in enumerate(neighbors):
            indptr[i + 1] = indptr[i] + len(row)
        indices = np.concatenate([np.asarray(r, dtype=np.int32) for r in neighbors]) \
            if indptr[-1] else np.zeros(0, dtype=np.int32)
        if coords is not None:
            coords = np.asarray(coords, dtype=float)
            diffs = coords[indices] - np.repeat(coords, np.diff(indptr), axis=0)
            edge_dist = np.hypot(diffs[:, 0], diffs[:, 1])
            if np.any(edge_dist <= 0):
                raise InputError("neighbor pairs must have positive distance")
        else:
            edge_dist = np.ones(indices.shape[0])
        if orders is not None:
            edge_order = np.concatenate([np.asarray(o, dtype=np.int8) for o in orders]) \
                if indptr[-1] else np.zeros(0, dtype=np.int8)
        else:
            edge_order = np.zeros(indices.shape[0], dtype=np.int8)
        return Population(n, coords, indptr, indices, edge_dist, edge_order)

    @staticmethod
    def grid(rows: int, cols: int, row_spacing_m: float, within_row_spacing_m: float,
             order: int = 3) -> "Population":
        coords = build_grid(rows, cols, row_spacing_m, within_row_spacing_m)
        neighbors, orders = queen_neighbors(rows, cols, order)
        return Population.from_neighbor_lists(neighbors, coords=coords, orders=orders)

    @staticmethod
    def complete(n: int) -> "Population":
        return Population.from_neighbor_lists(complete_graph(n))

    @staticmethod
    def from_coords(coords, radius_m: float) -> "Population":
        """Distance-based neighborhoods: NE(i) = {j != i : d(i,j) <= radius}."""
        coords = np.asarray(coords, dtype=float)
        if radius_m <= 0:
            raise InputError("neighborhood radius must be positive")
        n = coords.shape[0]
        neighbors = []
        for i in range(n):
            d = np.hypot(coords[:, 0] - coords[i, 0], coords[:, 1] - coords[i, 1])
            ids = np.where((d <= radius_m) & (np.arange(n) != i))[0]
            neighbors.append(ids.astype(np.int32))
        return Population.from_neighbor_lists(neighbors, coords=coords)

    # -- access ------------------------------------------------------------

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]: self.indptr[i + 1]]

    def reverse_neighbors(self, i: int) -> np.ndarray:
        return self.rev_indices[self.rev_indptr[i]: self.rev_indptr[i + 1]]

    def neighbor_lists(self):
        return [self.neighbors(i) for i in range(self.n)]

    def neighbor_descriptors(self, i: int, order: bool = False):
        """(neighbor id, descriptor) pairs; descriptor is the queen order
        when `order` is set, the distance otherwise."""
        lo, hi = self.indptr[i], self.indptr[i + 1]
        desc = self.edge_order[lo:hi] if order else self.edge_dist[lo:hi]
        return list(zip(self.indices[lo:hi].tolist(), desc.tolist()))

    def descriptors(self, order: bool = False) -> np.ndarray:
        """Per-edge kernel descriptor (distance or queen order)."""
        if order:
            if np.any(self.edge_order < 1):
                raise InputError("neighborhood-order kernel needs a grid population")
            return self.edge_order.astype(float)
        return self.edge_dist

    def distance_range(self) -> tuple[float, float]:
        if self.indices.size == 0:
            return (1.0, 1.0)
        return float(self.edge_dist.min()), float(self.edge_dist.max())


def _transpose_csr(n, indptr, indices):
    """Transpose adjacency, keeping for each reverse edge the index of the
    forward edge it mirrors."""
    counts = np.zeros(n + 1, dtype=np.int64)
    for j in indices:
        counts[j + 1] += 1
    rev_indptr = np.cumsum(counts)
    rev_indices = np.zeros(indices.shape[0], dtype=np.int32)
    rev_edge = np.zeros(indices.shape[0], dtype=np.int64)
    cursor = rev_indptr[:-1].copy()
    for j in range(n):
        for e in range(indptr[j], indptr[j + 1]):
            i = indices[e]
            pos = cursor[i]
            rev_indices[pos] = j
            rev_edge[pos] = e
            cursor[i] += 1
    return rev_indptr, rev_indices, rev_edge


def validate_covariates(W, T: int) -> np.ndarray:
    """Ward-closure (or similar) indicator series W_t for t = 0..T."""
    W = np.asarray(W)
    if W.shape != (T + 1,):
        raise InputError(f"covariate series must have length T+1={T + 1}")
    if not np.isin(W, (0, 1)).all():
        raise InputError("covariate entries must be 0/1")
    return W.astype(np.int8)
