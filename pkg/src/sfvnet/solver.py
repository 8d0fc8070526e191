"""Stochastic finite volume right-hand side and SSP-RK3 time stepping.

The state of every leaf is the probability-weighted average ``U_T = (rho, q)``
over a cell ``T = T_x x T_y``. Between adaptations the network meshes are
compiled into a :class:`Discretization`: flat arrays of cells, facet
quadrature nodes and junction nodes, so that evaluating

    dU_T/dt = -(1/h_T) * sum_facets int F* . n mu dy + S_bar

is a handful of vectorised numpy operations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy import sparse

from . import junction as jn
from .mesh import CellSet
from .network import (
    NetworkTopology, PipeParams, SupplyProfile, WithdrawalProfile, stochastic_dims_used, withdrawal_rate,
)
from .stochastic import gauss_legendre

SECONDS_PER_HOUR = 3600.0


class SolverError(RuntimeError):
    """Diagnostic failure of the solver (positivity, CFL, closure)."""


class CFLViolation(SolverError):
    pass


@dataclass(frozen=True)
class ReconstructionOperator:
    """``constant`` (reduced) or minmod-limited ``linear`` (enriched) reconstruction."""

    kind: str = "linear"
    limiter: str = "minmod"

    def __post_init__(self):
        if self.kind not in ("constant", "linear"):
            raise ValueError(f"unknown reconstruction {self.kind!r}")

    @property
    def is_linear(self) -> bool:
        return self.kind == "linear"


PIECEWISE_CONSTANT = ReconstructionOperator("constant")
LIMITED_LINEAR = ReconstructionOperator("linear")


def physical_flux(u, a: float) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    return np.stack([u[..., 1], a * a * u[..., 0]], axis=-1)


def numerical_flux(uL, uR, a: float) -> np.ndarray:
    """Upwind flux of the acoustic system, exact Godunov flux for eigenvalues +-a."""
    uL = np.asarray(uL, dtype=float)
    uR = np.asarray(uR, dtype=float)
    if np.any(uL[..., 0] <= 0) or np.any(uR[..., 0] <= 0):
        raise SolverError("nonpositive density in flux evaluation")
    return _flux(uL, uR, a)


def _flux(uL, uR, a):
    f0 = 0.5 * (uL[..., 1] + uR[..., 1]) - 0.5 * a * (uR[..., 0] - uL[..., 0])
    f1 = 0.5 * a * a * (uL[..., 0] + uR[..., 0]) - 0.5 * a * (uR[..., 1] - uL[..., 1])
    return np.stack([f0, f1], axis=-1)


def source_term(u, pipe: PipeParams) -> np.ndarray:
    """Darcy-Weisbach friction ``(0, -lambda/(2D) q|q|/rho)``."""
    u = np.asarray(u, dtype=float)
    if np.any(u[..., 0] <= 0):
        raise SolverError("nonpositive density in source term")
    return _source(u, pipe.friction_coefficient)


def _source(u, coeff):
    out = np.zeros_like(u)
    out[..., 1] = -coeff * u[..., 1] * np.abs(u[..., 1]) / u[..., 0]
    return out


def minmod(a, b):
    # clipping a to the interval between 0 and b is minmod(a, b)
    return np.clip(a, np.minimum(b, 0.0), np.maximum(b, 0.0))


# ---------------------------------------------------------------------- per-edge block
@dataclass
class EdgeBlock:
    """Compiled arrays of one edge (local indices)."""

    edge: str
    ids: np.ndarray
    h: np.ndarray
    dx: np.ndarray
    centers: np.ndarray  # (n, naxes): x midpoint, stochastic centroids
    widths: np.ndarray  # (n, naxes)
    nbr_low: list
    nbr_high: list
    dist_low: np.ndarray  # (n, naxes)
    dist_high: np.ndarray
    has_low: np.ndarray  # (n, naxes) bool
    has_high: np.ndarray
    f_left: np.ndarray  # facet cell indices
    f_right: np.ndarray
    nq: int  # quadrature nodes per facet
    off_left: np.ndarray  # (nf*nq, naxes) trace offsets from the cell centre
    off_right: np.ndarray
    node_w: np.ndarray  # (nf*nq,)
    node_y: np.ndarray  # (nf*nq, ndim)
    src_cell: np.ndarray | None = None
    src_off: np.ndarray | None = None
    src_w: np.ndarray | None = None
    trace_ops: tuple | None = None

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def naxes(self) -> int:
        return self.centers.shape[1]


def _neighbor_operator(n, a_loc, b_loc, weights_b):
    """Row-normalised averaging operator: row a gets the mean of its b's."""
    if len(a_loc) == 0:
        return sparse.csr_matrix((n, n)), np.zeros(n, dtype=bool)
    m = sparse.csr_matrix((weights_b, (a_loc, b_loc)), shape=(n, n))
    rows = np.asarray(m.sum(axis=1)).ravel()
    has = rows > 0
    scale = np.where(has, 1.0 / np.where(has, rows, 1.0), 0.0)
    return sparse.diags(scale) @ m, has


def compile_edge(cells: CellSet, order: int, with_source_nodes: bool = True, y_order=None) -> EdgeBlock:
    """Geometry, neighbour operators and facet quadrature of one edge's leaves.

    ``y_order`` (default ``order``) sets the stochastic quadrature order, per
    dimension if a sequence. The result is cached on ``cells`` until its leaf
    set changes.
    """
    y_order = order if y_order is None else (y_order if np.isscalar(y_order) else tuple(y_order))
    key = (order, with_source_nodes, y_order)
    if key not in cells._compiled:
        cells._compiled[key] = _compile_edge(cells, order, with_source_nodes, y_order)
    return cells._compiled[key]


def _compile_edge(cells: CellSet, order: int, with_source_nodes: bool, y_order) -> EdgeBlock:
    space = cells.space
    ids = cells.leaves()
    n = len(ids)
    naxes = cells.naxes
    loc = np.full(cells.n, -1, dtype=np.int64)
    loc[ids] = np.arange(n)

    xl, xh = cells.x_bounds(ids)
    ylo, yhi = cells.boxes(ids)
    dx = xh - xl
    prob = space.probabilities(ylo, yhi)
    h = dx * prob
    centers = np.column_stack([0.5 * (xl + xh), space.centroids(ylo, yhi)])
    widths = np.column_stack([dx, yhi - ylo])

    nbr_low, nbr_high = [], []
    dist_low = np.zeros((n, naxes))
    dist_high = np.zeros((n, naxes))
    has_low = np.zeros((n, naxes), dtype=bool)
    has_high = np.zeros((n, naxes), dtype=bool)
    pairs0 = None
    for axis in range(naxes):
        a_ids, b_ids = cells.adjacency(axis, ids)
        a_loc, b_loc = loc[a_ids], loc[b_ids]
        if axis == 0:
            pairs0 = (a_loc, b_loc)
        high, hh = _neighbor_operator(n, a_loc, b_loc, h[b_loc])
        low, hl = _neighbor_operator(n, b_loc, a_loc, h[a_loc])
        c = centers[:, axis]
        dist_high[:, axis] = np.where(hh, high @ c - c, 1.0)
        dist_low[:, axis] = np.where(hl, c - low @ c, 1.0)
        has_low[:, axis], has_high[:, axis] = hl, hh
        nbr_low.append(low.tocsr())
        nbr_high.append(high.tocsr())

    fl, fr = pairs0
    ilo = np.maximum(ylo[fl], ylo[fr])
    ihi = np.minimum(yhi[fl], yhi[fr])
    nodes, weights = space.batch_quadrature(ilo, ihi, y_order, normalize=True)
    nf, nq = weights.shape
    ndim = ylo.shape[1]
    node_y = nodes.reshape(nf * nq, ndim)
    cl = np.repeat(fl, nq)
    cr = np.repeat(fr, nq)
    off_left = np.column_stack([0.5 * dx[cl], node_y - centers[cl, 1:]])
    off_right = np.column_stack([-0.5 * dx[cr], node_y - centers[cr, 1:]])

    block = EdgeBlock(
        edge=cells.edge_id, ids=ids, h=h, dx=dx, centers=centers, widths=widths,
        nbr_low=nbr_low, nbr_high=nbr_high, dist_low=dist_low, dist_high=dist_high,
        has_low=has_low, has_high=has_high, f_left=fl, f_right=fr, nq=nq,
        off_left=off_left, off_right=off_right, node_w=weights.reshape(-1), node_y=node_y,
    )
    if with_source_nodes:
        gx, gw = gauss_legendre(order)
        ynodes, yw = space.batch_quadrature(ylo, yhi, y_order, normalize=True)
        ny_q = yw.shape[1]
        yw = yw / yw.sum(axis=1, keepdims=True)
        xoff = 0.5 * dx[:, None] * gx[None, :]  # (n, order)
        off_x = np.repeat(xoff, ny_q, axis=1)  # (n, order*ny_q)
        off_y = np.tile(ynodes - centers[:, None, 1:], (1, order, 1))
        w = (0.5 * gw)[None, :, None] * yw[:, None, :]
        block.src_cell = np.repeat(np.arange(n), order * ny_q)
        block.src_off = np.column_stack([off_x.reshape(-1), off_y.reshape(-1, ndim)])
        block.src_w = w.reshape(-1)
    return block


def edge_slopes(U, blk: EdgeBlock) -> np.ndarray:
    """Minmod slopes (n, naxes, 2) along every axis.

    Cells with a neighbour on one side only (pipe ends, edges of the
    stochastic domain) take the one-sided difference, so linear data is
    reproduced up to the boundary; isolated cells get 0.
    """
    return _slopes(U, blk.nbr_low, blk.nbr_high, blk.dist_low, blk.dist_high, blk.has_low, blk.has_high)


def _slopes(U, low, high, dist_low, dist_high, has_low, has_high):
    n = U.shape[0]
    out = np.zeros((n, len(low), 2))
    for k in range(len(low)):
        hl, hh = has_low[:, k, None], has_high[:, k, None]
        if not (hl.any() or hh.any()):
            continue
        dl = (U - low[k] @ U) / dist_low[:, k, None]
        dr = (high[k] @ U - U) / dist_high[:, k, None]
        # cells with one neighbour take the one-sided difference
        out[:, k, :] = np.where(hl & hh, minmod(dl, dr), np.where(hl, dl, np.where(hh, dr, 0.0)))
    return out


class TraceOp:
    """Point values ``U[idx] + sum_k S[idx, k] * off[:, k]`` as one sparse product.

    The operator acts on the stacked column ``[U; S[:, 0]; S[:, 1]; ...]``.
    """

    def __init__(self, idx, off, n: int):
        idx = np.asarray(idx, dtype=np.int64)
        m = len(idx)
        naxes = off.shape[1]
        rows = np.repeat(np.arange(m), 1 + naxes)
        cols = (idx[:, None] + n * np.arange(1 + naxes)[None, :]).ravel()
        vals = np.concatenate([np.ones((m, 1)), off], axis=1).ravel()
        self.matrix = sparse.csr_matrix((vals, (rows, cols)), shape=(m, (1 + naxes) * n))
        self.select = self.matrix[:, :n]

    def __call__(self, U, S=None, Z=None):
        if S is None:
            return self.select @ U
        return self.matrix @ (stack_slopes(U, S) if Z is None else Z)


def stack_slopes(U, S):
    return np.concatenate([U, S.transpose(1, 0, 2).reshape(-1, U.shape[1])], axis=0)


def interior_flux_divergence(U, blk: EdgeBlock, a: float, S=None) -> np.ndarray:
    """-(1/h) * (net interior facet flux) for one edge; boundary facets excluded."""
    if blk.trace_ops is None:
        blk.trace_ops = (
            TraceOp(np.repeat(blk.f_left, blk.nq), blk.off_left, blk.n),
            TraceOp(np.repeat(blk.f_right, blk.nq), blk.off_right, blk.n),
        )
    uL = blk.trace_ops[0](U, S)
    uR = blk.trace_ops[1](U, S)
    fw = _flux(uL, uR, a) * blk.node_w[:, None]
    fbar = fw.reshape(-1, blk.nq, 2).sum(axis=1)
    return _scatter(fbar, blk.f_left, blk.f_right, blk.h, len(blk.h))


def _scatter(fbar, left, right, h, n):
    out = np.empty((n, 2))
    for c in range(2):
        out[:, c] = np.bincount(right, fbar[:, c] / h[right], minlength=n) - np.bincount(
            left, fbar[:, c] / h[left], minlength=n
        )
    return out


def reconstruct(op: ReconstructionOperator, cells: CellSet, cid: int, xi, order: int = 1) -> np.ndarray:
    """Point value of the reconstruction of cell ``cid`` at ``xi = (x, y_1, ...)``."""
    blk = compile_edge(cells, order, with_source_nodes=False)
    i = np.flatnonzero(blk.ids == cid)
    if len(i) == 0:
        raise SolverError(f"cell {cid} is not a leaf")
    i = int(i[0])
    xi = np.asarray(xi, dtype=float).reshape(-1)
    lo = np.concatenate([[blk.centers[i, 0] - 0.5 * blk.dx[i]], cells.boxes([cid])[0][0]])
    hi = lo + blk.widths[i]
    if np.any(xi < lo - 1e-12 * np.abs(hi)) or np.any(xi > hi + 1e-12 * np.abs(hi)):
        raise SolverError(f"point {xi.tolist()} outside cell {cid}")
    U = cells.U[blk.ids]
    if np.any(np.isnan(U)):
        raise SolverError("cell averages are unset")
    if not op.is_linear:
        return U[i].copy()
    S = edge_slopes(U, blk)
    return U[i] + np.sum(S[i] * (xi - blk.centers[i])[:, None], axis=0)


# ---------------------------------------------------------------------- junction blocks
@dataclass
class JunctionBlock:
    junction: str
    kind: str
    edges: tuple[str, ...]
    orient: np.ndarray  # (K,)
    areas: np.ndarray  # (K,)
    cells: np.ndarray  # (nn, K) global cell indices
    off: np.ndarray  # (nn, K, naxes)
    node_y: np.ndarray  # (nn, ndim)
    node_w: np.ndarray  # (nn,)
    nq: int
    profile: SupplyProfile | WithdrawalProfile | None = None
    tau_index: int | None = None

    def demand(self, t_h: float):
        if self.kind != "withdrawal":
            return None
        tau = self.node_y[:, self.tau_index] if self.tau_index is not None else 0.0
        return withdrawal_rate(t_h, tau, self.profile)


class PartitionMismatch(SolverError):
    pass


@dataclass
class Discretization:
    """Compiled network: concatenated edge blocks plus junction closures."""

    a: float
    edges: tuple[str, ...]
    offsets: dict
    h: np.ndarray
    dx: np.ndarray
    coeff: np.ndarray  # friction coefficient per cell
    low: list
    high: list
    dist_low: np.ndarray
    dist_high: np.ndarray
    has_low: np.ndarray
    has_high: np.ndarray
    f_left: np.ndarray
    f_right: np.ndarray
    nq: int
    off_left: np.ndarray
    off_right: np.ndarray
    node_w: np.ndarray
    junctions: list
    src_cell: np.ndarray | None
    src_off: np.ndarray | None
    src_w: np.ndarray | None
    record: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.n
        self._left = TraceOp(np.repeat(self.f_left, self.nq), self.off_left, n)
        self._right = TraceOp(np.repeat(self.f_right, self.nq), self.off_right, n)
        # weighted facet-node fluxes -> cell updates
        m = len(self.node_w)
        right = np.repeat(self.f_right, self.nq)
        left = np.repeat(self.f_left, self.nq)
        self._div = sparse.csr_matrix(
            (
                np.concatenate([self.node_w / self.h[right], -self.node_w / self.h[left]]),
                (np.concatenate([right, left]), np.tile(np.arange(m), 2)),
            ),
            shape=(n, m),
        )
        # all junction nodes share one trace and one scatter operator
        cells, offs, vals, self._jslices, start = [], [], [], [], 0
        for jb in self.junctions:
            nn, K = jb.cells.shape
            cells.append(jb.cells.reshape(-1))
            offs.append(jb.off.reshape(nn * K, -1))
            vals.append((-jb.orient[None, :] * jb.node_w[:, None]).reshape(-1) / self.h[cells[-1]])
            self._jslices.append(slice(start, start + nn * K))
            start += nn * K
        if self.junctions:
            cells = np.concatenate(cells)
            self._jtrace = TraceOp(cells, np.concatenate(offs), n)
            self._jdiv = sparse.csr_matrix((np.concatenate(vals), (cells, np.arange(start))), shape=(n, start))
        if self.src_cell is None:
            self._src = None
        else:
            self._src = TraceOp(self.src_cell, self.src_off, n)
            ms = len(self.src_cell)
            self._src_sum = sparse.csr_matrix((self.src_w, (self.src_cell, np.arange(ms))), shape=(n, ms))
            self._src_coeff = self.coeff[self.src_cell]

    @property
    def n(self) -> int:
        return len(self.h)

    def slopes(self, U):
        return _slopes(U, self.low, self.high, self.dist_low, self.dist_high, self.has_low, self.has_high)

    def rhs(self, U, t: float, op: ReconstructionOperator = LIMITED_LINEAR) -> np.ndarray:
        """Semidiscrete time derivative of all cell averages at time ``t`` (s)."""
        a = self.a
        if np.any(U[:, 0] <= 0):
            raise SolverError(f"nonpositive density average (min {U[:, 0].min():.6g})")
        S = self.slopes(U) if op.is_linear else None
        Z = None if S is None else stack_slopes(U, S)
        uL = self._left(U, S, Z)
        uR = self._right(U, S, Z)
        out = self._div @ _flux(uL, uR, a)

        t_h = t / SECONDS_PER_HOUR
        traces = self._jtrace(U, S, Z) if self.junctions else None
        fluxes = []
        for jb, sl in zip(self.junctions, self._jslices):
            nn, K = jb.cells.shape
            u = traces[sl].reshape(nn, K, 2)
            try:
                if jb.kind == "supply":
                    rho, q = jn.closure(u, jb.orient, jb.areas, a, rho_fixed=jb.profile.density(t_h))
                else:
                    d = jb.demand(t_h)
                    rho, q = jn.closure(u, jb.orient, jb.areas, a, demand=d)
                    if self.record is not None and "balance" in self.record:
                        flows = jb.orient * jb.areas * q
                        dd = 0.0 if d is None else d
                        res = np.abs(flows.sum(axis=1) - dd) / (np.abs(flows).sum(axis=1) + np.abs(dd) + 1e-300)
                        self.record["balance"] = max(self.record["balance"], float(res.max()))
            except jn.JunctionError as exc:
                raise SolverError(f"junction {jb.junction}: {exc}") from None
            flux = np.stack([q, np.broadcast_to(a * a * rho[:, None], q.shape)], axis=-1)
            fluxes.append(flux.reshape(nn * K, 2))
        if fluxes:
            out += self._jdiv @ np.concatenate(fluxes)

        if S is None or self.src_cell is None:
            out += _source(U, self.coeff)
        else:
            us = self._src(U, S, Z)
            out[:, 1] -= self._src_sum @ (self._src_coeff * us[:, 1] * np.abs(us[:, 1]) / us[:, 0])
        return out

    def stable_dt(self, cfl: float) -> float:
        if self.n == 0:
            raise SolverError("empty mesh")
        return cfl * float(self.dx.min()) / self.a

    def gather(self, meshes: Mapping[str, CellSet]) -> np.ndarray:
        return np.concatenate([meshes[e].U[self.offsets[e][1]] for e in self.edges])

    def scatter(self, U, meshes: Mapping[str, CellSet]) -> None:
        for e in self.edges:
            start, ids = self.offsets[e]
            meshes[e].U[ids] = U[start : start + len(ids)]

    def index_of(self, edge: str, cid: int) -> int:
        start, ids = self.offsets[edge]
        i = np.flatnonzero(ids == cid)
        if len(i) == 0:
            raise SolverError(f"cell {cid} is not a leaf of edge {edge}")
        return start + int(i[0])

    def replicate(self, ys) -> Discretization:
        """Stack independent copies of a one-column (point measure) discretisation,
        one per realisation in ``ys`` (B, ndim)."""
        ys = np.asarray(ys, dtype=float)
        B, n = len(ys), self.n

        def tile_idx(idx):
            return (np.asarray(idx)[None, ...] + n * np.arange(B).reshape((B,) + (1,) * np.ndim(idx))).reshape(
                (-1,) + np.shape(idx)[1:]
            )

        def tile(arr):
            return np.tile(arr, (B,) + (1,) * (arr.ndim - 1))

        eye = sparse.identity(B, format="csr")
        juncs = []
        for jb in self.junctions:
            node_y = np.repeat(ys, len(jb.node_y), axis=0)
            juncs.append(
                JunctionBlock(
                    jb.junction, jb.kind, jb.edges, jb.orient, jb.areas,
                    cells=tile_idx(jb.cells), off=tile(jb.off), node_y=node_y,
                    node_w=tile(jb.node_w), nq=jb.nq, profile=jb.profile, tau_index=jb.tau_index,
                )
            )
        offsets = {e: (start, ids) for e, (start, ids) in self.offsets.items()}
        return Discretization(
            a=self.a, edges=self.edges, offsets=offsets, h=tile(self.h), dx=tile(self.dx),
            coeff=tile(self.coeff),
            low=[sparse.kron(eye, m, format="csr") for m in self.low],
            high=[sparse.kron(eye, m, format="csr") for m in self.high],
            dist_low=tile(self.dist_low), dist_high=tile(self.dist_high),
            has_low=tile(self.has_low), has_high=tile(self.has_high),
            f_left=tile_idx(self.f_left), f_right=tile_idx(self.f_right), nq=self.nq,
            off_left=tile(self.off_left), off_right=tile(self.off_right), node_w=tile(self.node_w),
            junctions=juncs,
            src_cell=None if self.src_cell is None else tile_idx(self.src_cell),
            src_off=None if self.src_off is None else tile(self.src_off),
            src_w=None if self.src_w is None else tile(self.src_w),
        )


def is_pass_through(topo: NetworkTopology, jid: str) -> bool:
    """Internal junction joining exactly one incoming and one outgoing pipe of equal area."""
    j = topo.junction(jid)
    inc = topo.incident(jid)
    if j.kind != "internal" or len(inc) != 2:
        return False
    (e1, o1), (e2, o2) = inc
    return {o1, o2} == {"in", "out"} and e1.params.area == e2.params.area and e1.id != e2.id


def compile_network(
    topo: NetworkTopology,
    meshes: Mapping[str, CellSet],
    order: int = 3,
    with_source_nodes: bool = True,
) -> Discretization:
    """Flatten all edge meshes plus junction closures into one :class:`Discretization`.

    Random dimensions that no network data depends on leave the solution
    constant along them, so their stochastic quadrature uses one node.
    """
    edges = tuple(e.id for e in topo.edges)
    space = meshes[edges[0]].space
    used = set(stochastic_dims_used(topo))
    y_order = tuple(order if d.name in used else 1 for d in space.dims)
    blocks = {e: compile_edge(meshes[e], order, with_source_nodes, y_order) for e in edges}
    offsets, start = {}, 0
    for e in edges:
        offsets[e] = (start, blocks[e].ids)
        start += blocks[e].n
    glob = {e: offsets[e][0] for e in edges}
    a = topo.sound_speed

    f_left = [blocks[e].f_left + glob[e] for e in edges]
    f_right = [blocks[e].f_right + glob[e] for e in edges]
    off_left = [blocks[e].off_left for e in edges]
    off_right = [blocks[e].off_right for e in edges]
    node_w = [blocks[e].node_w for e in edges]
    nq = blocks[edges[0]].nq

    def local(e, cid):
        return int(np.flatnonzero(blocks[e].ids == cid)[0])

    junctions, links = [], []
    for j in topo.junctions:
        inc = topo.incident(j.id)
        if not inc:
            continue
        parts = {}
        for e, o in inc:
            end = "right" if o == "in" else "left"
            parts[(e.id, o)] = (meshes[e.id].interface_cells(end), meshes[e.id].interface_partition(end))
        ref = next(iter(parts.values()))[1]
        for key, (_, part) in parts.items():
            if part != ref:
                raise PartitionMismatch(
                    f"stochastic partitions differ at junction {j.id} (edge {key[0]})"
                )
        first_e, first_o = inc[0]
        cells0 = parts[(first_e.id, first_o)][0]
        ylo, yhi = meshes[first_e.id].boxes(cells0)
        nodes, weights = space.batch_quadrature(ylo, yhi, y_order, normalize=True)
        nb, nqj = weights.shape
        node_y = nodes.reshape(nb * nqj, -1)

        if is_pass_through(topo, j.id):
            (e_in, _), (e_out, _) = sorted(inc, key=lambda eo: 0 if eo[1] == "in" else 1)
            cin = np.array([local(e_in.id, c) for c in parts[(e_in.id, "in")][0]])
            cout = np.array([local(e_out.id, c) for c in parts[(e_out.id, "out")][0]])
            bl, br = blocks[e_in.id], blocks[e_out.id]
            f_left.append(cin + glob[e_in.id])
            f_right.append(cout + glob[e_out.id])
            rl = np.repeat(cin, nqj)
            rr = np.repeat(cout, nqj)
            off_left.append(np.column_stack([0.5 * bl.dx[rl], node_y - bl.centers[rl, 1:]]))
            off_right.append(np.column_stack([-0.5 * br.dx[rr], node_y - br.centers[rr, 1:]]))
            node_w.append(weights.reshape(-1))
            links.append((cin + glob[e_in.id], cout + glob[e_out.id], 0.5 * (bl.dx[cin] + br.dx[cout])))
            continue

        K = len(inc)
        cells = np.empty((nb * nqj, K), dtype=np.int64)
        off = np.empty((nb * nqj, K, 1 + node_y.shape[1]))
        for k, (e, o) in enumerate(inc):
            blk = blocks[e.id]
            loc = np.array([local(e.id, c) for c in parts[(e.id, o)][0]])
            rows = np.repeat(loc, nqj)
            cells[:, k] = rows + glob[e.id]
            sign = 0.5 if o == "in" else -0.5
            off[:, k, 0] = sign * blk.dx[rows]
            off[:, k, 1:] = node_y - blk.centers[rows, 1:]
        profile = topo.profile_of(j.id)
        tau_index = None
        if isinstance(profile, WithdrawalProfile) and profile.is_stochastic:
            tau_index = space.index(profile.tau_dim)
        junctions.append(
            JunctionBlock(
                junction=j.id, kind=j.kind, edges=tuple(e.id for e, _ in inc),
                orient=np.array([jn.ORIENT_SIGN[o] for _, o in inc]),
                areas=np.array([e.params.area for e, _ in inc]),
                cells=cells, off=off, node_y=node_y, node_w=weights.reshape(-1), nq=nqj,
                profile=profile, tau_index=tau_index,
            )
        )

    naxes = blocks[edges[0]].naxes
    low = [sparse.block_diag([blocks[e].nbr_low[k] for e in edges], format="csr") for k in range(naxes)]
    high = [sparse.block_diag([blocks[e].nbr_high[k] for e in edges], format="csr") for k in range(naxes)]
    dist_low = np.concatenate([blocks[e].dist_low for e in edges])
    dist_high = np.concatenate([blocks[e].dist_high for e in edges])
    has_low = np.concatenate([blocks[e].has_low for e in edges])
    has_high = np.concatenate([blocks[e].has_high for e in edges])
    if links:
        # a pass-through junction is an ordinary facet, so x-slopes see across it
        cin, cout, dist = (np.concatenate(v) for v in zip(*links))
        ones = np.ones(len(cin))
        high[0] = high[0] + sparse.csr_matrix((ones, (cin, cout)), shape=high[0].shape)
        low[0] = low[0] + sparse.csr_matrix((ones, (cout, cin)), shape=low[0].shape)
        dist_high[cin, 0] = dist
        dist_low[cout, 0] = dist
        has_high[cin, 0] = True
        has_low[cout, 0] = True
    src = with_source_nodes
    return Discretization(
        a=a, edges=edges, offsets=offsets,
        h=np.concatenate([blocks[e].h for e in edges]),
        dx=np.concatenate([blocks[e].dx for e in edges]),
        coeff=np.concatenate(
            [np.full(blocks[e].n, topo.edge(e).params.friction_coefficient) for e in edges]
        ),
        low=low, high=high, dist_low=dist_low, dist_high=dist_high, has_low=has_low, has_high=has_high,
        f_left=np.concatenate(f_left), f_right=np.concatenate(f_right), nq=nq,
        off_left=np.concatenate(off_left), off_right=np.concatenate(off_right),
        node_w=np.concatenate(node_w), junctions=junctions,
        src_cell=np.concatenate([blocks[e].src_cell + glob[e] for e in edges]) if src else None,
        src_off=np.concatenate([blocks[e].src_off for e in edges]) if src else None,
        src_w=np.concatenate([blocks[e].src_w for e in edges]) if src else None,
    )


# ---------------------------------------------------------------------- time stepping
def ssp_rk3(L: Callable, u, t: float, dt: float):
    """One Shu-Osher SSP-RK3 step of u' = L(u, t)."""
    u1 = u + dt * L(u, t)
    u2 = 0.75 * u + 0.25 * (u1 + dt * L(u1, t + dt))
    return u / 3.0 + 2.0 / 3.0 * (u2 + dt * L(u2, t + 0.5 * dt))


def ssp_rk3_step(disc: Discretization, U, t: float, dt: float, op=LIMITED_LINEAR, cfl_max: float = 1.0):
    """Advance all averages by ``dt``; junctions are re-solved at every stage."""
    limit = disc.stable_dt(cfl_max)
    if dt > limit * (1.0 + 1e-12):
        raise CFLViolation(f"dt = {dt:.6g} s exceeds the stability limit {limit:.6g} s")
    return ssp_rk3(lambda u, s: disc.rhs(u, s, op), U, t, dt)


def stable_dt(meshes: Mapping[str, CellSet], a: float, cfl: float) -> float:
    """cfl * min |T_x| / a over all leaves of all edges."""
    if not 0 < cfl <= 1:
        raise ValueError("cfl must lie in (0, 1]")
    widths = []
    for cells in meshes.values():
        ids = cells.leaves()
        if len(ids):
            xl, xh = cells.x_bounds(ids)
            widths.append(np.min(xh - xl))
    if not widths:
        raise SolverError("empty mesh")
    return cfl * float(min(widths)) / a
