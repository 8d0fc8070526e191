"""Error-driven anisotropic adaptation of the edge meshes.

Per edge (Stage 1) the predicted one-step error of every leaf is the
difference between a forward-Euler flux update computed with limited-linear
traces and one computed with piecewise-constant traces. Leaves above the
tolerance are split along the axes whose smoothness indicator dominates;
sibling groups well below it are merged.

Across junctions (Stage 2) the stochastic partitions of all pipe ends meeting
at a junction are made identical again: splits are mirrored (refine wins) and
interface merges only happen when every incident end agrees.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .mesh import CellSet, RefinementInstruction
from .network import NetworkTopology
from .solver import _flux, compile_edge, edge_slopes, interior_flux_divergence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdaptivityConfig:
    """Tolerances and limits of the adaptation loop.

    ``max_level`` is either one cap for every axis or a sequence with one
    entry per axis (physical axis first). ``prolongation`` sets the values of
    new children: ``"linear"`` evaluates the parent's limited-linear
    reconstruction at each child centroid (conservative), ``"constant"``
    copies the parent average.
    """

    tolerance: float
    theta: float = 0.1
    eps_aniso: float = 0.3
    smoothness_degree: int = 1
    max_level: int | tuple[int, ...] = 8
    max_iterations: int = 10
    cadence: int = 5
    order: int = 3
    prolongation: str = "linear"

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if not 0 < self.theta < 1:
            raise ValueError("theta must lie in (0, 1)")
        if not 0 < self.eps_aniso < 1:
            raise ValueError("eps_aniso must lie in (0, 1)")
        if self.smoothness_degree < 1 or self.max_iterations < 1 or self.cadence < 1:
            raise ValueError("smoothness degree, iteration cap and cadence must be >= 1")
        if self.prolongation not in ("linear", "constant"):
            raise ValueError(f"unknown prolongation {self.prolongation!r}")

    def max_levels(self, naxes: int) -> np.ndarray:
        if np.isscalar(self.max_level):
            return np.full(naxes, int(self.max_level))
        caps = np.asarray(self.max_level, dtype=int)
        if len(caps) != naxes:
            raise ValueError(f"max_level needs {naxes} entries, got {len(caps)}")
        return caps


@dataclass
class ErrorReport:
    ids: np.ndarray
    eta: np.ndarray  # (n,)
    beta: np.ndarray  # (n, naxes)

    @property
    def eta_max(self) -> float:
        return float(self.eta.max()) if len(self.eta) else 0.0

    def of(self, cid: int) -> float:
        return float(self.eta[np.flatnonzero(self.ids == cid)[0]])


def _weighted(v, a: float):
    """Express a (rho, q) quantity in density units: max(|rho|, |q|/a)."""
    return np.maximum(np.abs(v[..., 0]), np.abs(v[..., 1]) / a)


def predict_errors(cells: CellSet, a: float, dt: float, order: int = 3, degree: int = 1) -> ErrorReport:
    """Predicted local update error and per-axis smoothness of every leaf.

    ``eta_T = dt_T * max(|dR_rho|, |dR_q|/a)`` with ``dR`` the difference of
    the enriched and reduced flux divergences over interior facets and
    ``dt_T = min(dt, |T_x|/a)``.
    """
    blk = compile_edge(cells, order, with_source_nodes=False)
    U = cells.U[blk.ids]
    if np.any(np.isnan(U)):
        raise ValueError(f"edge {cells.edge_id}: cell averages are unset")
    S = edge_slopes(U, blk)
    dR = interior_flux_divergence(U, blk, a, S) - interior_flux_divergence(U, blk, a, None)
    dR += _end_facet_difference(cells, blk, U, S, a)
    dt_cell = np.minimum(dt, blk.dx / a)
    eta = dt_cell * _weighted(dR, a)
    beta = smoothness_values(S, blk.widths, a, degree)
    return ErrorReport(blk.ids, eta, beta)


def _end_facet_difference(cells: CellSet, blk, U, S, a: float) -> np.ndarray:
    """Enriched minus reduced divergence from the two pipe-end facets.

    The outside state is the linear extrapolation of the end cell, so only
    data of this edge is used and linear profiles give no contribution.
    """
    out = np.zeros_like(U)
    loc = {int(c): i for i, c in enumerate(blk.ids)}
    for end, sign in (("left", -1.0), ("right", 1.0)):
        idx = np.array([loc[int(c)] for c in cells.interface_cells(end)])
        u, jump = U[idx], S[idx, 0, :] * blk.dx[idx, None]
        ghost = u + sign * jump
        trace = u + sign * 0.5 * jump
        if sign < 0:
            diff = _flux(trace, trace, a) - _flux(ghost, u, a)
        else:
            diff = _flux(trace, trace, a) - _flux(u, ghost, a)
        out[idx] -= sign * diff / blk.dx[idx, None]
    return out


def smoothness_values(S, widths, a: float, degree: int = 1) -> np.ndarray:
    """beta per cell and axis for linear reconstructions: (s * dxi)^2.

    Derivatives of order >= 2 of a linear reconstruction vanish, so every
    degree gives the first-order term only.
    """
    del degree
    return (_weighted(S, a) * widths) ** 2


def smoothness_indicator(cells: CellSet, cid: int, axis: int, degree: int = 1, a: float = 1.0) -> float:
    blk = compile_edge(cells, 1, with_source_nodes=False)
    i = int(np.flatnonzero(blk.ids == cid)[0])
    S = edge_slopes(cells.U[blk.ids], blk)
    return float(smoothness_values(S[i : i + 1], blk.widths[i : i + 1], a, degree)[0, axis])


def predict_cell_error(cells: CellSet, cid: int, dt: float, a: float, order: int = 3) -> float:
    return predict_errors(cells, a, dt, order).of(cid)


def select_directions(beta: Sequence[float], eps_aniso: float) -> tuple[int, ...]:
    """Axes whose share of the smoothness sum exceeds ``eps_aniso``; all axes if flat."""
    beta = np.asarray(beta, dtype=float)
    total = beta.sum()
    if not total > 0:
        return tuple(range(len(beta)))
    chosen = tuple(int(k) for k in np.flatnonzero(beta > eps_aniso * total))
    # the largest share always qualifies when eps_aniso < max/sum
    return chosen if chosen else (int(np.argmax(beta)),)


def mark(report: ErrorReport, config: AdaptivityConfig):
    """(refine mask, coarsen-eligible mask) for the leaves of ``report``."""
    return report.eta > config.tolerance, report.eta < config.theta * config.tolerance


@dataclass
class EdgeAdaptation:
    edge: str
    instructions: list[RefinementInstruction] = field(default_factory=list)
    eta_before: float = 0.0
    eta_after: float = 0.0
    iterations: int = 0
    converged: bool = True
    deferred: dict = field(default_factory=dict)  # interface groups awaiting junction consensus

    @property
    def refined(self) -> int:
        return sum(1 for r in self.instructions if r.action == "refine")

    @property
    def coarsened(self) -> int:
        return sum(1 for r in self.instructions if r.action == "coarsen")

    def direction_histogram(self) -> dict[int, int]:
        hist = Counter()
        for r in self.instructions:
            if r.action == "refine":
                hist.update(r.directions)
        return dict(sorted(hist.items()))


def refine_cells(cells: CellSet, requests, prolongation: str = "linear", order: int = 3) -> list[int]:
    """Apply ``requests`` with ``cells.refine_many`` and set the new leaf values.

    With linear prolongation each new leaf takes the value of the limited
    slopes of its pre-refinement ancestor at the leaf centroid. Centroids are
    probability weighted, so the children's measure-weighted sum equals the
    parent's content up to rounding.
    """
    if prolongation == "constant":
        return cells.refine_many(requests)
    blk = compile_edge(cells, order, with_source_nodes=False)
    U0 = cells.U[blk.ids].copy()
    S = edge_slopes(U0, blk)
    row = {int(c): i for i, c in enumerate(blk.ids)}
    new = cells.refine_many(requests)
    leaves = np.array([c for c in new if cells.is_leaf(c)], dtype=np.int64)
    if len(leaves) == 0:
        return new
    anc = np.empty(len(leaves), dtype=np.int64)
    for k, c in enumerate(leaves):
        c = int(c)
        while c not in row:
            c = cells.parent_of(c)
        anc[k] = row[c]
    xl, xh = cells.x_bounds(leaves)
    ylo, yhi = cells.boxes(leaves)
    centres = np.column_stack([0.5 * (xl + xh), cells.space.centroids(ylo, yhi)])
    shift = centres - blk.centers[anc]
    cells.U[leaves] = U0[anc] + np.einsum("ka,kac->kc", shift, S[anc])
    return new


def _touches(cells: CellSet, parent: int) -> list[str]:
    lo, hi = cells.lattice_box([parent])
    ends = []
    if lo[0, 0] == 0:
        ends.append("left")
    if hi[0, 0] == cells.extent[0]:
        ends.append("right")
    return ends


def _coarsen_candidates(cells: CellSet, report: ErrorReport, calm: np.ndarray):
    calm_ids = set(int(c) for c in report.ids[calm])
    return sorted(p for p, (kids, _) in cells.groups.items() if all(k in calm_ids for k in kids))


def adapt_edge(
    cells: CellSet, config: AdaptivityConfig, dt: float, a: float, allow_coarsen: bool = True
) -> EdgeAdaptation:
    """Refine/coarsen one edge until the predicted error is at most the tolerance.

    Groups whose merge would change the stochastic partition at a pipe end are
    not merged here; they are returned in ``deferred`` for junction consensus.
    """
    caps = config.max_levels(cells.naxes)
    result = EdgeAdaptation(cells.edge_id)
    report = predict_errors(cells, a, dt, config.order, config.smoothness_degree)
    result.eta_before = report.eta_max

    # coarsening pass (once, before refinement, so a call never undoes its own splits)
    _, calm = mark(report, config)
    for parent in _coarsen_candidates(cells, report, calm) if allow_coarsen else []:
        if cells.coarsen_refusal(parent) is not None:
            continue
        dirs = cells.split_directions(parent)
        ends = _touches(cells, parent)
        if ends and any(k > 0 for k in dirs):
            result.deferred[parent] = ends
            continue
        cells.coarsen(parent)
        result.instructions.append(RefinementInstruction(cells.edge_id, parent, "coarsen", dirs))
    if result.coarsened:
        report = predict_errors(cells, a, dt, config.order, config.smoothness_degree)

    for it in range(config.max_iterations):
        result.iterations = it + 1
        flagged, _ = mark(report, config)
        if not flagged.any():
            break
        requests = []
        for i in np.flatnonzero(flagged):
            cid = int(report.ids[i])
            open_axes = cells.level([cid])[0] < caps
            # axes already at their cap are dropped after selection, never substituted
            dirs = tuple(k for k in select_directions(report.beta[i], config.eps_aniso) if open_axes[k])
            if dirs:
                requests.append((cid, dirs))
        if not requests:
            break
        for cid, dirs in requests:
            result.instructions.append(RefinementInstruction(cells.edge_id, cid, "refine", dirs))
        refine_cells(cells, requests, config.prolongation, config.order)
        report = predict_errors(cells, a, dt, config.order, config.smoothness_degree)

    result.eta_after = report.eta_max
    result.converged = result.eta_after <= config.tolerance
    result.deferred = {p: e for p, e in result.deferred.items() if cells.coarsen_refusal(p) is None}
    if not result.converged:
        log.info("edge %s: tolerance not reached, residual eta %.3e", cells.edge_id, result.eta_after)
    return result


# ---------------------------------------------------------------------- Stage 2
def _ends_at(topo: NetworkTopology, jid: str):
    return [(e.id, "right" if o == "in" else "left") for e, o in topo.incident(jid)]


def _y_box(cells: CellSet, cid: int):
    lo, hi = cells.lattice_box([cid])
    return lo[0, 1:], hi[0, 1:]


def _finer_axes(cells: CellSet, cid: int, boxes) -> tuple[int, ...]:
    """Stochastic axes along which some box of ``boxes`` is strictly finer inside ``cid``."""
    lo, hi = _y_box(cells, cid)
    axes = set()
    for blo, bhi in boxes:
        blo, bhi = np.asarray(blo), np.asarray(bhi)
        if np.all(blo < hi) and np.all(bhi > lo):
            finer = (bhi - blo) < (hi - lo)
            axes.update(int(k) + 1 for k in np.flatnonzero(finer))
    return tuple(sorted(axes))


def synchronize_junctions(
    topo: NetworkTopology,
    meshes: Mapping[str, CellSet],
    max_rounds: int = 64,
    prolongation: str = "linear",
    order: int = 3,
) -> list[RefinementInstruction]:
    """Refine pipe ends until every junction sees one common stochastic partition."""
    added = []
    for _ in range(max_rounds):
        changed = False
        for j in topo.junctions:
            ends = _ends_at(topo, j.id)
            if len(ends) < 2:
                continue
            parts = {(e, end): meshes[e].interface_partition(end) for e, end in ends}
            if len({tuple(p) for p in parts.values()}) == 1:
                continue
            union = set().union(*parts.values())
            for (e, end), part in parts.items():
                cells = meshes[e]
                requests = []
                for cid in cells.interface_cells(end):
                    dirs = _finer_axes(cells, int(cid), union)
                    if dirs:
                        requests.append((int(cid), dirs))
                if requests:
                    refine_cells(cells, requests, prolongation, order)
                    added.extend(RefinementInstruction(e, c, "refine", d) for c, d in requests)
                    changed = True
        if not changed:
            return added
    raise RuntimeError("junction partition synchronisation did not reach a fixpoint")


def propagate_junction_compatibility(
    topo: NetworkTopology,
    meshes: Mapping[str, CellSet],
    results: Mapping[str, EdgeAdaptation] | None = None,
    prolongation: str = "linear",
    order: int = 3,
) -> list[RefinementInstruction]:
    """Stage 2: agreed interface merges, then mirrored interface splits (refine wins).

    Returns the instructions added on top of the per-edge results.
    """
    added = []
    if results:
        added.extend(_consensus_coarsening(topo, meshes, results))
    added.extend(synchronize_junctions(topo, meshes, prolongation=prolongation, order=order))
    return added


def _group_key(cells: CellSet, parent: int):
    lo, hi = _y_box(cells, parent)
    ydirs = tuple(k for k in cells.split_directions(parent) if k > 0)
    return tuple(lo.tolist()), tuple(hi.tolist()), ydirs


def _consensus_coarsening(topo, meshes, results) -> list[RefinementInstruction]:
    # proposals[(edge, end)] = {key: parent}
    proposals: dict[tuple[str, str], dict] = {}
    for e, res in results.items():
        cells = meshes[e]
        for parent, ends in res.deferred.items():
            if cells.coarsen_refusal(parent) is not None:
                continue
            key = _group_key(cells, parent)
            for end in ends:
                proposals.setdefault((e, end), {})[key] = parent
    votes: dict[tuple[str, int], int] = Counter()
    needed: dict[tuple[str, int], int] = {}
    for j in topo.junctions:
        ends = _ends_at(topo, j.id)
        keys = None
        for e_end in ends:
            k = set(proposals.get(e_end, {}))
            keys = k if keys is None else keys & k
        for e_end in ends:
            for key, parent in proposals.get(e_end, {}).items():
                needed[(e_end[0], parent)] = len(results[e_end[0]].deferred[parent])
                if keys and key in keys:
                    votes[(e_end[0], parent)] += 1
    added = []
    for (e, parent), n_ends in sorted(needed.items()):
        if votes[(e, parent)] == n_ends and meshes[e].coarsen_refusal(parent) is None:
            dirs = meshes[e].split_directions(parent)
            meshes[e].coarsen(parent)
            added.append(RefinementInstruction(e, parent, "coarsen", dirs))
    return added


def partitions_agree(topo: NetworkTopology, meshes: Mapping[str, CellSet]) -> bool:
    for j in topo.junctions:
        parts = {tuple(meshes[e].interface_partition(end)) for e, end in _ends_at(topo, j.id)}
        if len(parts) > 1:
            return False
    return True


@dataclass
class NetworkAdaptation:
    edges: dict[str, EdgeAdaptation]
    junction_instructions: list[RefinementInstruction]
    eta: dict[str, float]
    tolerance: float

    @property
    def success(self) -> bool:
        return all(v <= self.tolerance for v in self.eta.values())

    @property
    def eta_max(self) -> float:
        return max(self.eta.values()) if self.eta else 0.0


def adapt_network(
    topo: NetworkTopology, meshes: Mapping[str, CellSet], config: AdaptivityConfig, dt: float, rounds: int = 3
) -> NetworkAdaptation:
    """Stage 1 on every edge, Stage 2 across junctions; repeated while Stage 2
    pushes some edge back above the tolerance."""
    a = topo.sound_speed
    edges = {}
    extra = []
    for r in range(rounds):
        results = {e.id: adapt_edge(meshes[e.id], config, dt, a, allow_coarsen=r == 0) for e in topo.edges}
        for e, res in results.items():
            if e in edges:
                prev = edges[e]
                prev.instructions.extend(res.instructions)
                prev.eta_after = res.eta_after
                prev.iterations += res.iterations
                prev.converged = res.converged
            else:
                edges[e] = res
        extra.extend(propagate_junction_compatibility(topo, meshes, results, config.prolongation, config.order))
        eta = {e.id: predict_errors(meshes[e.id], a, dt, config.order).eta_max for e in topo.edges}
        if all(v <= config.tolerance for v in eta.values()) or not any(
            res.instructions for res in results.values()
        ):
            break
    return NetworkAdaptation(edges, extra, eta, config.tolerance)
