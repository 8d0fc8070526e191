"""Monte Carlo reference statistics from independent deterministic realisations.

Each realisation runs the production solver with a :class:`PointMeasure`,
i.e. one stochastic cell whose parameters are fixed at the sampled point.
Many realisations are advanced together as one block-diagonal system.

Before its withdrawal event starts a realisation is bit-for-bit identical to
a base run in which the event never happens, so realisations are only
materialised (copied from the base run) shortly before their onset. Activating
early never changes a result, only costs time.
"""

from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .network import WithdrawalProfile
from .simulation import ProbeRecorder, RunConfig, Simulation
from .solver import SECONDS_PER_HOUR, SolverError, ssp_rk3_step
from .statistics import ProbeSpec, probe_slice
from .stochastic import PointMeasure, StochasticSpace

WORKERS_ENV = "SFVNET_WORKERS"


class RealizationError(SolverError):
    """A realisation failed; carries its index, parameter point and seed."""

    def __init__(self, message: str, index: int, y, seed: int):
        self.index = index
        self.y = np.asarray(y, dtype=float)
        self.seed = seed
        super().__init__(f"realisation {index} (y = {self.y.tolist()}, seed {seed}): {message}")


@dataclass(frozen=True)
class McConfig:
    samples: int
    seed: int = 0
    nx: Mapping[str, int] | None = None
    probes: tuple[ProbeSpec, ...] | None = None
    chunk: int = 160

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.chunk < 1:
            raise ValueError("chunk must be >= 1")
        if self.nx is not None and any(int(v) < 1 for v in self.nx.values()):
            raise ValueError("nx must be >= 1 on every edge")


def realization_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream of realisation ``index``; independent of scheduling."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def realization_points(space: StochasticSpace, seed: int, n: int, start: int = 0) -> np.ndarray:
    return np.array([space.sample(realization_rng(seed, i)) for i in range(start, start + n)]).reshape(n, space.ndim)


def event_onsets(cfg: RunConfig, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Earliest event onset (hours) per realisation and a parameter point with no event.

    The second value has every onset dimension at +inf; other coordinates are
    irrelevant to the dynamics and set to the domain's lower corner.
    """
    ys = np.asarray(ys, dtype=float)
    never = np.array(cfg.space.lo, dtype=float)
    onset = np.full(len(ys), np.inf)
    for j in cfg.topo.junctions:
        prof = cfg.topo.profile_of(j.id)
        if isinstance(prof, WithdrawalProfile) and prof.is_stochastic:
            k = cfg.space.index(prof.tau_dim)
            never[k] = np.inf
            onset = np.minimum(onset, ys[:, k])
    return onset, never


@dataclass
class Trajectories:
    """Probe states of many realisations: ``values[probe]`` is (N, T, 2)."""

    times_h: np.ndarray
    values: dict
    ys: np.ndarray
    steps: int = 0


def _probe_rows(sim: Simulation, probes) -> list[int]:
    disc = sim.discretization
    rows = []
    for p in probes:
        cells = sim.meshes[p.edge]
        sl = probe_slice(cells, p.position * cells.length)
        ids = cells.leaves()
        xl, xh = cells.x_bounds(ids)
        x = p.position * cells.length
        cid = ids[(xl <= x) & ((x < xh) | ((xh == cells.length) & (x == cells.length)))]
        if len(sl) != 1 or len(cid) != 1:
            raise SolverError(f"probe {p.name} does not resolve to a single deterministic cell")
        rows.append(disc.index_of(p.edge, int(cid[0])))
    return rows


def run_realizations(
    cfg: RunConfig,
    ys: np.ndarray,
    t_end_h: float,
    nx: Mapping[str, int] | None = None,
    probes: Sequence[ProbeSpec] | None = None,
    times_h: Sequence[float] | None = None,
    chunk: int = 160,
    seed: int = 0,
    indices: Sequence[int] | None = None,
) -> Trajectories:
    """Advance all realisations ``ys`` (N, ndim) to ``t_end_h`` in one batched system.

    Probe states are recorded at ``times_h`` (default: the configured output
    times). ``seed`` and ``indices`` only label failures.
    """
    ys = np.asarray(ys, dtype=float).reshape(-1, cfg.space.ndim)
    N = len(ys)
    probes = tuple(cfg.probes if probes is None else probes)
    times = np.asarray(cfg.output_times_h(t_end_h) if times_h is None else times_h, dtype=float)
    indices = np.arange(N) if indices is None else np.asarray(indices)
    onset, never = event_onsets(cfg, ys)

    sim = Simulation(cfg, measure=PointMeasure(cfg.space, cfg.space.lo), adaptivity=False, nx=nx)
    disc = sim.discretization
    rows = _probe_rows(sim, probes)
    n = disc.n
    base_disc = disc.replicate(never[None, :])
    base = disc.gather(sim.meshes)

    order = np.argsort(onset, kind="stable")
    groups = [order[i : i + chunk] for i in range(0, N, chunk)]
    active = np.zeros(0, dtype=np.int64)
    act_disc, act_U = None, np.zeros((0, 2))

    values = {p.name: np.empty((N, len(times), 2)) for p in probes}
    op = cfg.solver.operator
    t, steps, out_i = 0.0, 0, 0
    T = t_end_h * SECONDS_PER_HOUR

    def record(k):
        for p, r in zip(probes, rows):
            v = values[p.name]
            v[:, k, :] = base[r]
            if len(active):
                v[active, k, :] = act_U[r::n]

    while out_i < len(times) and times[out_i] * SECONDS_PER_HOUR <= t + 1e-9:
        record(out_i)
        out_i += 1
    while t < T - 1e-9:
        dt = disc.stable_dt(cfg.solver.cfl)
        target = min([T] + [s * SECONDS_PER_HOUR for s in times[out_i:] if s * SECONDS_PER_HOUR > t + 1e-9])
        landing = t + dt >= target - 1e-9 * dt
        if landing:
            dt = target - t
        # materialise every group whose earliest onset falls before the step ends
        added = False
        while groups and onset[groups[0][0]] * SECONDS_PER_HOUR <= t + 2.0 * dt:
            g = groups.pop(0)
            active = np.concatenate([active, g])
            act_U = np.concatenate([act_U, np.tile(base, (len(g), 1))])
            added = True
        if added:
            act_disc = disc.replicate(ys[active])
        try:
            if groups:
                new_base = ssp_rk3_step(base_disc, base, t, dt, op)
            if len(active):
                act_U = ssp_rk3_step(act_disc, act_U, t, dt, op)
        except SolverError as exc:
            _locate_failure(disc, ys, active, act_U, base, t, dt, op, indices, seed, exc)
        if groups:
            base = new_base
        t = target if landing else t + dt
        steps += 1
        while out_i < len(times) and abs(times[out_i] * SECONDS_PER_HOUR - t) <= 1e-9:
            record(out_i)
            out_i += 1
    return Trajectories(times, values, ys, steps)


def _locate_failure(disc, ys, active, act_U, base, t, dt, op, indices, seed, exc):
    """Re-run the failed step one realisation at a time to name the culprit."""
    n = disc.n
    for b, i in enumerate(active):
        try:
            ssp_rk3_step(disc.replicate(ys[i][None, :]), act_U[b * n : (b + 1) * n], t, dt, op)
        except SolverError as e:
            raise RealizationError(str(e), int(indices[i]), ys[i], seed) from None
    raise RealizationError(f"base run failed: {exc}", -1, ys[0] * np.nan, seed) from None


def solve_deterministic(
    cfg: RunConfig,
    y,
    t_end_h: float | None = None,
    nx: Mapping[str, int] | None = None,
) -> Trajectories:
    """One realisation through the ordinary simulation driver."""
    t_end = cfg.t_end_h if t_end_h is None else t_end_h
    sim = Simulation(cfg, measure=PointMeasure(cfg.space, y), adaptivity=False, nx=nx)
    rec = ProbeRecorder(cfg.probes)
    sim.advance(t_end, rec, cfg.output_times_h(t_end))
    values = {p.name: np.asarray(rec.means[p.name])[None, :, :] for p in cfg.probes}
    return Trajectories(np.array(rec.times), values, np.asarray(y, dtype=float)[None, :], sim.steps)


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


def _run_part(args):
    cfg, ys, t_end_h, nx, times, chunk, seed, idx = args
    return run_realizations(cfg, ys, t_end_h, nx, None, times, chunk, seed, idx)


@dataclass
class McResult:
    times_h: np.ndarray
    samples: dict  # probe -> (N, T, 2)
    ys: np.ndarray
    mean: dict = field(default_factory=dict)  # probe -> (T, 2)
    var: dict = field(default_factory=dict)
    se_mean: dict = field(default_factory=dict)
    se_var: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.ys)

    def at(self, probe: str, t_h: float) -> np.ndarray:
        """Samples (N, 2) of ``probe`` at output time ``t_h``."""
        k = np.flatnonzero(np.abs(self.times_h - t_h) < 1e-9)
        if len(k) == 0:
            raise KeyError(f"time {t_h} h was not recorded")
        return self.samples[probe][:, int(k[0]), :]


def sample_statistics(x: np.ndarray, axis: int = 0):
    """Mean, unbiased variance and their Monte Carlo standard errors.

    With a single sample the variance and both errors are NaN.
    """
    x = np.asarray(x, dtype=float)
    N = x.shape[axis]
    mean = x.mean(axis=axis)
    if N < 2:
        nan = np.full_like(mean, np.nan)
        return mean, nan, nan.copy(), nan.copy()
    dev = x - np.expand_dims(mean, axis)
    var = (dev**2).sum(axis=axis) / (N - 1)
    m4 = (dev**4).mean(axis=axis)
    se_mean = np.sqrt(var / N)
    # standard error of the unbiased variance estimator
    se_var = np.sqrt(np.maximum(m4 - (N - 3) / (N - 1) * var**2, 0.0) / N)
    return mean, var, se_mean, se_var


def mc_statistics(
    cfg: RunConfig,
    mc: McConfig,
    t_end_h: float | None = None,
    times_h: Sequence[float] | None = None,
    workers: int | None = None,
) -> McResult:
    """Sample, run and summarise ``mc.samples`` realisations.

    Realisation ``i`` draws its parameters from its own stream
    ``(seed, i)``, so results do not depend on chunking or worker count.
    """
    t_end = cfg.t_end_h if t_end_h is None else t_end_h
    times = np.asarray(cfg.output_times_h(t_end) if times_h is None else times_h, dtype=float)
    if mc.probes is not None:
        cfg = _with_probes(cfg, mc.probes)
    ys = realization_points(cfg.space, mc.seed, mc.samples)
    workers = worker_count() if workers is None else workers
    N = len(ys)
    if workers <= 1 or N < 2:
        traj = run_realizations(cfg, ys, t_end, mc.nx, None, times, mc.chunk, mc.seed)
        samples = traj.values
    else:
        onset, _ = event_onsets(cfg, ys)
        order = np.argsort(onset, kind="stable")
        parts = [order[w::workers] for w in range(workers)]
        jobs = [(cfg, ys[p], t_end, mc.nx, times, mc.chunk, mc.seed, p) for p in parts if len(p)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_part, jobs))
        samples = {p.name: np.empty((N, len(times), 2)) for p in cfg.probes}
        for part, r in zip([p for p in parts if len(p)], results):
            for name, v in r.values.items():
                samples[name][part] = v
    res = McResult(times, samples, ys)
    for name, v in samples.items():
        res.mean[name], res.var[name], res.se_mean[name], res.se_var[name] = sample_statistics(v, axis=0)
    return res


def _with_probes(cfg: RunConfig, probes) -> RunConfig:
    return dataclasses.replace(cfg, probes=tuple(probes))


__all__ = [
    "McConfig",
    "McResult",
    "RealizationError",
    "Trajectories",
    "WORKERS_ENV",
    "event_onsets",
    "mc_statistics",
    "realization_points",
    "realization_rng",
    "run_realizations",
    "sample_statistics",
    "solve_deterministic",
    "worker_count",
]
