"""Per-edge tensor meshes over (physical x stochastic) space.

A :class:`CellSet` covers one pipe ``[0, L]`` times the stochastic domain with
a forest of binary splits grown from a structured root grid. Any subset of
the axes may be split at once (anisotropic refinement). Axis 0 is the pipe
coordinate, axes ``1..ndim`` are the random dimensions.

Cell corners live on an integer lattice (``2**LATTICE_BITS`` units per root
cell along each axis), so facets shared by two leaves compare exactly.
Cell ids are row indices that are never reused.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

LATTICE_BITS = 30
REMOVED, LEAF, INTERIOR = 0, 1, 2


class MeshError(RuntimeError):
    pass


class CoarsenRefused(MeshError):
    pass


@dataclass(frozen=True)
class Cell:
    id: int
    x_lo: float
    x_hi: float
    box: np.ndarray
    level: tuple[int, ...]
    h: float
    U: np.ndarray


@dataclass(frozen=True)
class RefinementInstruction:
    edge: str
    cell: int
    action: str  # "refine" | "coarsen"
    directions: tuple[int, ...]

    def __post_init__(self):
        if self.action not in ("refine", "coarsen"):
            raise ValueError(f"unknown action {self.action!r}")
        if self.action == "refine" and not self.directions:
            raise ValueError("refine needs at least one direction")


class CellSet:
    """Leaves of one edge's adaptive mesh, stored as struct-of-arrays."""

    def __init__(self, edge_id: str, length: float, space, nx: int, ny, max_level: int = 24):
        ndim = space.ndim
        ny = (ny,) * ndim if np.isscalar(ny) else tuple(ny)
        if nx < 1 or len(ny) != ndim or min(ny) < 1:
            raise MeshError(f"need at least one cell per axis, got nx={nx}, ny={ny}")
        if max_level > LATTICE_BITS:
            raise MeshError("max_level exceeds lattice resolution")
        self.edge_id = edge_id
        self.length = float(length)
        self.space = space
        self.naxes = 1 + ndim
        self.roots = (int(nx),) + tuple(int(v) for v in ny)
        self.max_level = max_level
        self.extent = np.array(self.roots, dtype=np.int64) << LATTICE_BITS
        n_root = int(np.prod(self.roots))
        cap = max(16, 2 * n_root)
        self._lo = np.zeros((cap, self.naxes), dtype=np.int64)
        self._hi = np.zeros((cap, self.naxes), dtype=np.int64)
        self._level = np.zeros((cap, self.naxes), dtype=np.int64)
        self._parent = np.full(cap, -1, dtype=np.int64)
        self._status = np.zeros(cap, dtype=np.int8)
        self.U = np.full((cap, 2), np.nan)
        self.groups: dict[int, tuple[tuple[int, ...], tuple[int, ...]]] = {}
        self.n = 0
        self._leaf_cache: np.ndarray | None = None
        self._compiled: dict = {}  # solver operators of the current leaf set
        self.version = 0

        unit = np.int64(1) << LATTICE_BITS
        idx = np.indices(self.roots).reshape(self.naxes, -1).T.astype(np.int64)
        rows = self._alloc(len(idx))
        self._lo[rows] = idx * unit
        self._hi[rows] = (idx + 1) * unit
        self._status[rows] = LEAF

    # ------------------------------------------------------------------ storage
    def _alloc(self, k: int) -> np.ndarray:
        need = self.n + k
        if need > len(self._status):
            cap = max(need, 2 * len(self._status))
            for name in ("_lo", "_hi", "_level", "U"):
                old = getattr(self, name)
                fill = np.nan if name == "U" else 0
                new = np.full((cap, old.shape[1]), fill, dtype=old.dtype)
                new[: self.n] = old[: self.n]
                setattr(self, name, new)
            parent = np.full(cap, -1, dtype=np.int64)
            parent[: self.n] = self._parent[: self.n]
            status = np.zeros(cap, dtype=np.int8)
            status[: self.n] = self._status[: self.n]
            self._parent, self._status = parent, status
        rows = np.arange(self.n, need)
        self.n = need
        return rows

    def _touch(self):
        self._leaf_cache = None
        self._compiled = {}
        self.version += 1

    def copy(self) -> CellSet:
        other = object.__new__(CellSet)
        other.__dict__.update(self.__dict__)
        for name in ("_lo", "_hi", "_level", "_parent", "_status", "U"):
            setattr(other, name, getattr(self, name).copy())
        other.groups = dict(self.groups)
        other._leaf_cache = None
        other._compiled = {}
        return other

    # ------------------------------------------------------------------ geometry
    def leaves(self) -> np.ndarray:
        """Leaf ids ordered by physical position, then stochastic position."""
        if self._leaf_cache is None:
            ids = np.flatnonzero(self._status[: self.n] == LEAF)
            keys = [self._lo[ids, k] for k in range(self.naxes - 1, -1, -1)]
            self._leaf_cache = ids[np.lexsort(keys)]
        return self._leaf_cache

    @property
    def num_leaves(self) -> int:
        return len(self.leaves())

    def is_leaf(self, cid: int) -> bool:
        return 0 <= cid < self.n and self._status[cid] == LEAF

    def level(self, ids) -> np.ndarray:
        return self._level[ids]

    def lattice_box(self, ids):
        return self._lo[ids], self._hi[ids]

    def x_bounds(self, ids):
        f_lo = self._lo[ids, 0] / self.extent[0]
        f_hi = self._hi[ids, 0] / self.extent[0]
        return self.length * f_lo, self.length * f_hi

    def _y(self, ints, k):
        f = ints / self.extent[1 + k]
        d = self.space.dims[k]
        return d.lo * (1.0 - f) + d.hi * f

    def boxes(self, ids):
        """Stochastic corners of cells ``ids``: two (m, ndim) arrays."""
        ids = np.atleast_1d(ids)
        ndim = self.naxes - 1
        lo = np.empty((len(ids), ndim))
        hi = np.empty((len(ids), ndim))
        for k in range(ndim):
            lo[:, k] = self._y(self._lo[ids, 1 + k], k)
            hi[:, k] = self._y(self._hi[ids, 1 + k], k)
        return lo, hi

    def probabilities(self, ids) -> np.ndarray:
        lo, hi = self.boxes(ids)
        return self.space.probabilities(lo, hi)

    def measure(self, ids) -> np.ndarray:
        """h_T = |T_x| * P(T_y)."""
        xl, xh = self.x_bounds(ids)
        return (xh - xl) * self.probabilities(ids)

    def cell(self, cid: int) -> Cell:
        if not (0 <= cid < self.n) or self._status[cid] == REMOVED:
            raise MeshError(f"no cell {cid} on edge {self.edge_id}")
        xl, xh = self.x_bounds([cid])
        lo, hi = self.boxes([cid])
        return Cell(
            id=int(cid),
            x_lo=float(xl[0]),
            x_hi=float(xh[0]),
            box=np.stack([lo[0], hi[0]], axis=1),
            level=tuple(int(v) for v in self._level[cid]),
            h=float(self.measure([cid])[0]),
            U=self.U[cid].copy(),
        )

    def total_measure(self) -> float:
        return float(np.sum(self.measure(self.leaves())))

    def total_conserved(self) -> np.ndarray:
        """Sum of h_T * U_T over the leaves."""
        ids = self.leaves()
        return np.sum(self.measure(ids)[:, None] * self.U[ids], axis=0)

    # ------------------------------------------------------------------ adjacency
    def _facet_neighbors(self, lo, hi, axis: int, side: int) -> np.ndarray:
        leaves = self.leaves()
        llo, lhi = self._lo[leaves], self._hi[leaves]
        if side > 0:
            mask = llo[:, axis] == hi[axis]
        else:
            mask = lhi[:, axis] == lo[axis]
        for k in range(self.naxes):
            if k != axis:
                mask &= (llo[:, k] < hi[k]) & (lhi[:, k] > lo[k])
        return leaves[mask]

    def neighbors(self, cid: int, axis: int, side: int) -> np.ndarray:
        """Leaves sharing the facet of ``cid`` on ``side`` (-1 low, +1 high) of ``axis``."""
        if not self.is_leaf(cid):
            raise MeshError(f"cell {cid} is not a leaf")
        return self._facet_neighbors(self._lo[cid], self._hi[cid], axis, side)

    def adjacency(self, axis: int, leaves: np.ndarray | None = None):
        """All facet-sharing leaf pairs (low side, high side) along ``axis``."""
        if leaves is None:
            leaves = self.leaves()
        lo, hi = self._lo[leaves], self._hi[leaves]
        order = np.argsort(lo[:, axis], kind="stable")
        slo = lo[order, axis]
        start = np.searchsorted(slo, hi[:, axis], "left")
        stop = np.searchsorted(slo, hi[:, axis], "right")
        cnt = stop - start
        total = int(cnt.sum())
        a = np.repeat(np.arange(len(leaves)), cnt)
        first = np.repeat(start - np.concatenate([[0], np.cumsum(cnt)[:-1]]), cnt)
        b = order[first + np.arange(total)]
        ok = np.ones(total, dtype=bool)
        for k in range(self.naxes):
            if k != axis:
                ok &= (lo[a, k] < hi[b, k]) & (hi[a, k] > lo[b, k])
        return leaves[a[ok]], leaves[b[ok]]

    def check_one_irregular(self) -> list[tuple[int, int, int]]:
        """Violating (cell, neighbour, axis) triples; empty when 1-irregular."""
        bad = []
        for axis in range(self.naxes):
            a, b = self.adjacency(axis)
            diff = np.abs(self._level[a] - self._level[b])
            for i in np.flatnonzero(np.any(diff > 1, axis=1)):
                bad.append((int(a[i]), int(b[i]), axis))
        return bad

    def interface_cells(self, end: str) -> np.ndarray:
        """Leaves touching the ``"left"`` (x=0) or ``"right"`` (x=L) pipe end,
        ordered by stochastic box."""
        leaves = self.leaves()
        if end == "left":
            sel = leaves[self._lo[leaves, 0] == 0]
        elif end == "right":
            sel = leaves[self._hi[leaves, 0] == self.extent[0]]
        else:
            raise ValueError(f"end must be 'left' or 'right', got {end!r}")
        keys = [self._lo[sel, k] for k in range(self.naxes - 1, 0, -1)]
        return sel[np.lexsort(keys)] if keys else sel

    def interface_partition(self, end: str) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        """Stochastic lattice boxes at a pipe end (for partition comparisons)."""
        ids = self.interface_cells(end)
        return [(tuple(self._lo[i, 1:].tolist()), tuple(self._hi[i, 1:].tolist())) for i in ids]

    # ------------------------------------------------------------------ adaptation
    def _split(self, cid: int, dirs: tuple[int, ...]) -> list[int]:
        lo, hi, lev = self._lo[cid].copy(), self._hi[cid].copy(), self._level[cid].copy()
        for k in dirs:
            if lev[k] + 1 > self.max_level:
                raise MeshError(f"cell {cid} would exceed max level {self.max_level} on axis {k}")
        rows = self._alloc(1 << len(dirs))
        for row, halves in zip(rows, itertools.product((0, 1), repeat=len(dirs))):
            clo, chi, clev = lo.copy(), hi.copy(), lev.copy()
            for k, half in zip(dirs, halves):
                mid = (lo[k] + hi[k]) // 2
                if half == 0:
                    chi[k] = mid
                else:
                    clo[k] = mid
                clev[k] += 1
            self._lo[row], self._hi[row], self._level[row] = clo, chi, clev
            self._parent[row] = cid
            self._status[row] = LEAF
            self.U[row] = self.U[cid]
        self._status[cid] = INTERIOR
        self.groups[cid] = (tuple(int(r) for r in rows), tuple(dirs))
        self._touch()
        return [int(r) for r in rows]

    def _cascade(self, queue: list[int]) -> list[int]:
        created = []
        while queue:
            c = queue.pop()
            if self._status[c] != LEAF:
                continue
            lev = self._level[c]
            for axis in range(self.naxes):
                for side in (-1, 1):
                    for nb in self._facet_neighbors(self._lo[c], self._hi[c], axis, side):
                        if self._status[nb] != LEAF:
                            continue
                        need = tuple(k for k in range(self.naxes) if self._level[nb, k] < lev[k] - 1)
                        if need:
                            kids = self._split(int(nb), need)
                            created.extend(kids)
                            queue.extend(kids)
        return created

    def _check_dirs(self, directions) -> tuple[int, ...]:
        dirs = tuple(sorted({int(k) for k in directions}))
        if not dirs:
            raise MeshError("refinement needs at least one direction")
        if dirs[0] < 0 or dirs[-1] >= self.naxes:
            raise MeshError(f"directions {dirs} out of range for {self.naxes} axes")
        return dirs

    def refine(self, cid: int, directions) -> list[int]:
        """Split leaf ``cid`` at the midpoint of each axis in ``directions``.

        Children inherit the parent average. Neighbours are refined as needed
        to keep the mesh 1-irregular. Returns the children of ``cid``.
        """
        if not self.is_leaf(cid):
            raise MeshError(f"cannot refine non-leaf cell {cid}")
        kids = self._split(cid, self._check_dirs(directions))
        self._cascade(list(kids))
        return kids

    def refine_many(self, requests) -> list[int]:
        """Apply several (cell, directions) splits, then restore 1-irregularity once."""
        new = []
        for cid, dirs in requests:
            if self.is_leaf(cid):
                new.extend(self._split(cid, self._check_dirs(dirs)))
        new.extend(self._cascade(list(new)))
        return new

    def coarsen_refusal(self, parent: int) -> str | None:
        """Why the sibling group under ``parent`` cannot be merged, or None."""
        if parent not in self.groups or self._status[parent] != INTERIOR:
            return f"cell {parent} has no sibling group"
        kids, _ = self.groups[parent]
        if not all(self._status[k] == LEAF for k in kids):
            return f"sibling group of {parent} is incomplete (not all children are leaves)"
        plev = self._level[parent]
        for axis in range(self.naxes):
            for side in (-1, 1):
                for nb in self._facet_neighbors(self._lo[parent], self._hi[parent], axis, side):
                    if np.any(self._level[nb] > plev + 1):
                        return f"coarsening {parent} would break 1-irregularity next to cell {nb}"
        return None

    def coarsen(self, parent: int) -> int:
        """Merge the children of ``parent`` back into it (conservative average)."""
        reason = self.coarsen_refusal(parent)
        if reason is not None:
            raise CoarsenRefused(reason)
        kids = np.array(self.groups.pop(parent)[0])
        h = self.measure(kids)
        base = self.U[kids[0]]
        self.U[parent] = base + np.sum(h[:, None] * (self.U[kids] - base), axis=0) / np.sum(h)
        self._status[kids] = REMOVED
        self._status[parent] = LEAF
        self._touch()
        return int(parent)

    def parent_of(self, cid: int) -> int:
        return int(self._parent[cid])

    def split_directions(self, parent: int) -> tuple[int, ...]:
        return self.groups[parent][1]

    def children(self, parent: int) -> tuple[int, ...]:
        return self.groups[parent][0]

    # ------------------------------------------------------------------ export
    def snapshot_rows(self):
        ids = self.leaves()
        xl, xh = self.x_bounds(ids)
        lo, hi = self.boxes(ids)
        h = self.measure(ids)
        for i, cid in enumerate(ids):
            box = ";".join(f"{a:.12g}:{b:.12g}" for a, b in zip(lo[i], hi[i]))
            lev = ";".join(str(v) for v in self._level[cid])
            yield [self.edge_id, int(cid), xl[i], xh[i], box, lev, h[i], self.U[cid, 0], self.U[cid, 1]]


SNAPSHOT_COLUMNS = ["edge", "cell", "x_lo", "x_hi", "box", "levels", "h", "rho", "q"]


def build_initial_mesh(edge_id: str, params, space, nx: int, ny, max_level: int = 24) -> CellSet:
    """Uniform ``nx`` x ``ny``^ndim grid on one pipe; averages unset."""
    return CellSet(edge_id, params.length, space, nx, ny, max_level=max_level)
