"""Moments and push-forward densities from probability-weighted cell averages.

Within a stochastic cell the solution is represented by its average, so the
distribution of a probe value is a discrete mixture: cell ``k`` places mass
``p_k`` at ``U_k``. Densities are histograms of that mixture, optionally
smoothed with a Gaussian kernel for presentation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .mesh import CellSet

COMPONENTS = {"rho": 0, "q": 1}
DEFAULT_BINS = 128
DEFAULT_BANDWIDTH = 2.0  # in bin widths


class StatisticsError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeSpec:
    name: str
    edge: str
    position: float  # x / L
    times_h: tuple[float, ...] = ()
    components: tuple[str, ...] = ("rho", "q")

    def __post_init__(self):
        if not 0.0 <= self.position <= 1.0:
            raise StatisticsError(f"probe {self.name}: position must lie in [0, 1]")
        for c in self.components:
            if c not in COMPONENTS:
                raise StatisticsError(f"probe {self.name}: unknown component {c!r}")


@dataclass
class Slice:
    """Stochastic column of leaves at one physical point."""

    lo: np.ndarray  # (m, ndim) box corners
    hi: np.ndarray
    p: np.ndarray  # (m,)
    U: np.ndarray  # (m, 2)

    def __len__(self) -> int:
        return len(self.p)


def probe_slice(cells: CellSet, x: float) -> Slice:
    """Leaves whose physical interval contains ``x`` (the last cell owns ``x = L``)."""
    if not 0.0 <= x <= cells.length:
        raise StatisticsError(f"position {x} outside edge {cells.edge_id} of length {cells.length}")
    ids = cells.leaves()
    xl, xh = cells.x_bounds(ids)
    sel = (xl <= x) & ((x < xh) | ((xh == cells.length) & (x == cells.length)))
    ids = ids[sel]
    lo, hi = cells.boxes(ids)
    return Slice(lo, hi, cells.probabilities(ids), cells.U[ids].copy())


def moments(sl: Slice) -> tuple[np.ndarray, np.ndarray]:
    """Probability-weighted mean and variance of (rho, q)."""
    if len(sl) == 0:
        raise StatisticsError("empty slice")
    p = sl.p / sl.p.sum()
    mean = p @ sl.U
    var = p @ (sl.U - mean) ** 2
    return mean, var


def _kernel(n: int, bandwidth: float) -> np.ndarray:
    """Column-normalised Gaussian smoothing matrix (mass preserving)."""
    i = np.arange(n)
    k = np.exp(-0.5 * ((i[:, None] - i[None, :]) / bandwidth) ** 2)
    return k / k.sum(axis=0, keepdims=True)


def _edges(values, bins: int, value_range):
    if value_range is None:
        lo, hi = float(np.min(values)), float(np.max(values))
    else:
        lo, hi = (float(v) for v in value_range)
    if not hi > lo:
        return np.array([lo, hi])
    return np.linspace(lo, hi, bins + 1)


@dataclass
class DensityHistogram:
    edges: list[np.ndarray]  # one array of bin edges per axis
    masses: np.ndarray  # 1D or 2D
    bandwidth: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def centers(self) -> list[np.ndarray]:
        return [0.5 * (e[1:] + e[:-1]) for e in self.edges]

    def marginal(self, axis: int) -> np.ndarray:
        other = tuple(k for k in range(self.masses.ndim) if k != axis)
        return self.masses.sum(axis=other) if other else self.masses


def _bin(values, weights, edges):
    if len(edges) == 2 and edges[0] == edges[1]:
        return np.array([weights.sum()])
    idx = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, len(edges) - 2)
    return np.bincount(idx, weights, minlength=len(edges) - 1)


def _normalize(m):
    s = m.sum()
    if not s > 0:
        raise StatisticsError("histogram has no mass")
    return m / s


def push_forward_density(
    sl_or_values,
    component: str = "rho",
    bins: int = DEFAULT_BINS,
    bandwidth: float = DEFAULT_BANDWIDTH,
    value_range=None,
    weights=None,
) -> DensityHistogram:
    """Histogram of the mixture ``sum_k p_k delta(U_k)`` for one component.

    Accepts a :class:`Slice` or raw values (with optional ``weights``, e.g.
    Monte Carlo samples). ``bandwidth`` is in bin widths; 0 gives the raw
    histogram.
    """
    if bins < 1:
        raise StatisticsError("bins must be >= 1")
    values, w = _values(sl_or_values, weights, component)
    edges = _edges(values, bins, value_range)
    m = _bin(values, w, edges)
    if bandwidth > 0 and len(m) > 1:
        m = _kernel(len(m), bandwidth) @ m
    return DensityHistogram([edges], _normalize(m), bandwidth)


def joint_density(
    sl_or_values,
    bins: int | tuple[int, int] = DEFAULT_BINS,
    bandwidth: float = DEFAULT_BANDWIDTH,
    ranges=(None, None),
    weights=None,
) -> DensityHistogram:
    """Joint (rho, q) histogram of the mixture; smoothing is separable."""
    nb = (bins, bins) if np.isscalar(bins) else tuple(bins)
    if min(nb) < 1:
        raise StatisticsError("bins must be >= 1")
    U, w = _values(sl_or_values, weights, None)
    edges = [_edges(U[:, k], nb[k], ranges[k]) for k in range(2)]
    n0, n1 = len(edges[0]) - 1, len(edges[1]) - 1
    i0 = _bin_index(U[:, 0], edges[0])
    i1 = _bin_index(U[:, 1], edges[1])
    m = np.bincount(i0 * n1 + i1, w, minlength=n0 * n1).reshape(n0, n1)
    if bandwidth > 0:
        if n0 > 1:
            m = _kernel(n0, bandwidth) @ m
        if n1 > 1:
            m = m @ _kernel(n1, bandwidth).T
    return DensityHistogram(edges, _normalize(m), bandwidth)


def _bin_index(values, edges):
    if len(edges) == 2 and edges[0] == edges[1]:
        return np.zeros(len(values), dtype=np.int64)
    return np.clip(np.searchsorted(edges, values, side="right") - 1, 0, len(edges) - 2)


def _values(src, weights, component):
    if isinstance(src, Slice):
        U, w = src.U, src.p
    else:
        U = np.asarray(src, dtype=float)
        w = np.ones(len(U)) if weights is None else np.asarray(weights, dtype=float)
    if len(U) == 0:
        raise StatisticsError("no values")
    if component is None:
        return U.reshape(-1, 2), w
    return (U[:, COMPONENTS[component]] if U.ndim == 2 else U), w


def count_modes(masses: np.ndarray, rel_floor: float = 1e-6) -> int:
    """Number of strict local maxima of a 1D histogram (edges count as one-sided)."""
    m = np.asarray(masses, dtype=float)
    if len(m) == 1:
        return 1
    floor = rel_floor * m.max()
    padded = np.concatenate([[-np.inf], m, [-np.inf]])
    peak = (padded[1:-1] > padded[:-2]) & (padded[1:-1] > padded[2:]) & (m > floor)
    return int(peak.sum())


def histogram_l1(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def common_l1(values_a, weights_a, values_b, weights_b, bins: int) -> float:
    """L1 distance of two weighted samples binned on their pooled range."""
    lo = min(np.min(values_a), np.min(values_b))
    hi = max(np.max(values_a), np.max(values_b))
    ha = push_forward_density(values_a, bins=bins, bandwidth=0, value_range=(lo, hi), weights=weights_a)
    hb = push_forward_density(values_b, bins=bins, bandwidth=0, value_range=(lo, hi), weights=weights_b)
    return histogram_l1(ha.masses, hb.masses)


def interpolate_series(times: Sequence[float], values: np.ndarray, t: float) -> np.ndarray:
    """Linear interpolation of a recorded (time, ...) series at ``t``."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(times) == 0 or t < times[0] - 1e-12 or t > times[-1] + 1e-12:
        raise StatisticsError(f"time {t} outside the recorded range")
    if values.ndim == 1:
        return np.interp(t, times, values)
    return np.stack([np.interp(t, times, values[:, k]) for k in range(values.shape[1])], axis=-1)


@dataclass
class StatSnapshot:
    probe: str
    time_h: float
    mean: np.ndarray
    var: np.ndarray
    density: DensityHistogram | None = None
    joint: DensityHistogram | None = None


def timeseries_statistics(records: Sequence[StatSnapshot], times_h: Sequence[float]) -> list[StatSnapshot]:
    """Interpolate recorded moment snapshots of one probe to ``times_h``."""
    if not records:
        raise StatisticsError("no recorded snapshots")
    t = np.array([r.time_h for r in records])
    mean = np.array([r.mean for r in records])
    var = np.array([r.var for r in records])
    out = []
    for s in times_h:
        out.append(StatSnapshot(records[0].probe, float(s), interpolate_series(t, mean, s), interpolate_series(t, var, s)))
    return out
