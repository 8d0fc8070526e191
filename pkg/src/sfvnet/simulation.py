"""Run configuration, steady-state initialisation and the time loop."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
from scipy import optimize

from .adaptivity import AdaptivityConfig, NetworkAdaptation, adapt_network, partitions_agree
from .mesh import CellSet, build_initial_mesh
from .network import (
    ConfigError,
    NetworkTopology,
    WithdrawalProfile,
    load_toml,
    network_from_dict,
)
from .solver import (
    LIMITED_LINEAR,
    PIECEWISE_CONSTANT,
    SECONDS_PER_HOUR,
    Discretization,
    SolverError,
    compile_network,
    ssp_rk3_step,
)
from .statistics import DEFAULT_BANDWIDTH, DEFAULT_BINS, ProbeSpec, moments, probe_slice
from .stochastic import PointMeasure, StochasticSpace, gauss_legendre, parse_stochastic


@dataclass(frozen=True)
class SolverSettings:
    cfl: float = 0.9
    order: int = 3
    reconstruction: str = "linear"

    @property
    def operator(self):
        return LIMITED_LINEAR if self.reconstruction == "linear" else PIECEWISE_CONSTANT


@dataclass(frozen=True)
class OutputSettings:
    directory: str = "out"
    snapshot_every_h: float = 0.25
    density_times_h: tuple[float, ...] = ()
    bins: int = DEFAULT_BINS
    bandwidth: float = DEFAULT_BANDWIDTH
    mesh_snapshots: bool = True


@dataclass(frozen=True)
class McSettings:
    samples: int = 1000
    seed: int = 0
    chunk: int = 160  # realisations activated together


@dataclass
class RunConfig:
    topo: NetworkTopology
    space: StochasticSpace
    t_end_h: float = 24.0
    nx: Mapping[str, int] = field(default_factory=dict)
    ny: tuple[int, ...] = (8,)
    solver: SolverSettings = SolverSettings()
    adaptivity: AdaptivityConfig | None = None
    probes: tuple[ProbeSpec, ...] = ()
    output: OutputSettings = OutputSettings()
    mc: McSettings = McSettings()
    initial: Mapping[str, Any] = field(default_factory=lambda: {"kind": "steady"})
    doc: Mapping[str, Any] = field(default_factory=dict)

    def output_times_h(self, t_end_h: float | None = None) -> np.ndarray:
        """Snapshot times plus density times, clipped to ``[0, t_end]``."""
        t_end = self.t_end_h if t_end_h is None else t_end_h
        k = int(math.floor(t_end / self.output.snapshot_every_h + 1e-9))
        times = set(np.round(np.arange(k + 1) * self.output.snapshot_every_h, 12).tolist())
        times.update(t for t in self.output.density_times_h if t <= t_end)
        times.add(float(t_end))
        return np.array(sorted(times))

    @property
    def digest(self) -> str:
        import tomli_w

        return hashlib.sha256(tomli_w.dumps(_plain(self.doc)).encode()).hexdigest()


def _plain(obj):
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _get(section: Mapping, key: str, default, kind, loc: str):
    if key not in section:
        return default
    try:
        return kind(section[key])
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key!r}: {section[key]!r}", loc) from None


def parse_run_config(doc: Mapping) -> RunConfig:
    """Full run configuration from a parsed TOML mapping."""
    topo = network_from_dict(doc)
    if "stochastic" not in doc:
        raise ConfigError("missing section", "stochastic")
    space = parse_stochastic(doc["stochastic"])
    for p in topo.profiles.values():
        if isinstance(p, WithdrawalProfile) and p.is_stochastic and p.tau_dim not in space.names:
            raise ConfigError(f"unknown stochastic dimension {p.tau_dim!r}", f"profiles.{p.name}")

    run = doc.get("run", {})
    t_end = _get(run, "t_end_h", 24.0, float, "run")
    if not t_end >= 0:
        raise ConfigError("t_end_h must be >= 0", "run")
    solver = SolverSettings(
        cfl=_get(run, "cfl", 0.9, float, "run"),
        order=_get(run, "order", 3, int, "run"),
        reconstruction=_get(run, "reconstruction", "linear", str, "run"),
    )
    if not 0 < solver.cfl <= 1 or solver.order < 1 or solver.reconstruction not in ("linear", "constant"):
        raise ConfigError("need 0 < cfl <= 1, order >= 1, reconstruction linear|constant", "run")

    mesh = doc.get("mesh", {})
    nx = {}
    raw_nx = mesh.get("nx", {})
    dx = _get(mesh, "dx_m", None, float, "mesh")
    for e in topo.edges:
        if isinstance(raw_nx, Mapping) and e.id in raw_nx:
            nx[e.id] = int(raw_nx[e.id])
        elif not isinstance(raw_nx, Mapping):
            nx[e.id] = int(raw_nx)
        elif dx is not None:
            nx[e.id] = max(1, int(round(e.params.length / dx)))
        else:
            nx[e.id] = 8
        if nx[e.id] < 1:
            raise ConfigError("nx must be >= 1", f"mesh.nx.{e.id}")
    ny_raw = mesh.get("ny", 8)
    ny = (int(ny_raw),) * space.ndim if np.isscalar(ny_raw) else tuple(int(v) for v in ny_raw)
    if len(ny) != space.ndim or min(ny) < 1:
        raise ConfigError("ny needs one positive count per stochastic dimension", "mesh")

    adapt = None
    ad = doc.get("adaptivity", {})
    if ad.get("enabled", False):
        try:
            adapt = AdaptivityConfig(
                tolerance=float(ad["tolerance"]),
                theta=float(ad.get("theta", 0.1)),
                eps_aniso=float(ad.get("eps_aniso", 0.3)),
                smoothness_degree=int(ad.get("smoothness_degree", 1)),
                max_level=(int(ad.get("max_level_x", 8)),) + tuple(
                    [int(ad.get("max_level_y", 8))] * space.ndim
                ),
                max_iterations=int(ad.get("max_iterations", 10)),
                cadence=int(ad.get("cadence", 5)),
                order=solver.order,
                prolongation=str(ad.get("prolongation", "linear")),
            )
        except KeyError as exc:
            raise ConfigError(f"missing key {exc.args[0]!r}", "adaptivity") from None
        except ValueError as exc:
            raise ConfigError(str(exc), "adaptivity") from None

    probes = []
    for i, raw in enumerate(doc.get("probes", [])):
        loc = f"probes[{i}]"
        try:
            probe = ProbeSpec(
                name=str(raw["name"]),
                edge=str(raw["edge"]),
                position=float(raw.get("position", 0.5)),
                times_h=tuple(float(v) for v in raw.get("times_h", ())),
                components=tuple(raw.get("components", ("rho", "q"))),
            )
        except KeyError as exc:
            raise ConfigError(f"missing key {exc.args[0]!r}", loc) from None
        except ValueError as exc:
            raise ConfigError(str(exc), loc) from None
        try:
            topo.edge(probe.edge)
        except KeyError:
            raise ConfigError(f"unknown edge {probe.edge!r}", loc) from None
        probes.append(probe)

    out = doc.get("output", {})
    output = OutputSettings(
        directory=_get(out, "dir", "out", str, "output"),
        snapshot_every_h=_get(out, "snapshot_every_h", 0.25, float, "output"),
        density_times_h=tuple(float(v) for v in out.get("density_times_h", ())),
        bins=_get(out, "bins", DEFAULT_BINS, int, "output"),
        bandwidth=_get(out, "bandwidth", DEFAULT_BANDWIDTH, float, "output"),
        mesh_snapshots=_get(out, "mesh_snapshots", True, bool, "output"),
    )
    if not output.snapshot_every_h > 0:
        raise ConfigError("snapshot_every_h must be positive", "output")
    mc = doc.get("mc", {})
    mcs = McSettings(
        samples=_get(mc, "samples", 1000, int, "mc"),
        seed=_get(mc, "seed", 0, int, "mc"),
        chunk=_get(mc, "chunk", 160, int, "mc"),
    )
    if mcs.samples < 1 or mcs.chunk < 1:
        raise ConfigError("samples and chunk must be >= 1", "mc")
    initial = dict(doc.get("initial", {"kind": "steady"}))
    if initial.get("kind", "steady") not in ("steady", "uniform"):
        raise ConfigError(f"unknown initial kind {initial.get('kind')!r}", "initial")
    return RunConfig(topo, space, t_end, nx, ny, solver, adapt, tuple(probes), output, mcs, initial, doc)


def load_run_config(path) -> RunConfig:
    try:
        doc = load_toml(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", str(path)) from None
    except ValueError as exc:
        raise ConfigError(f"schema violation: {exc}", str(path)) from None
    return parse_run_config(doc)


def bundled_example_path() -> Path:
    return Path(__file__).with_name("data") / "example_network.toml"


# ---------------------------------------------------------------------- steady state
def base_demand(profile, t_h: float) -> float:
    """Withdrawal before any uncertain event has started."""
    return float(profile.d1(t_h))


def steady_state(topo: NetworkTopology, t_h: float = 0.0, rho_ref: float | None = None):
    """Steady flow: per-edge mass flow Q (kg/s) and inlet density.

    Solves node mass balance with the base withdrawals and, on every pipe,
    the friction balance ``rho_to^2 = rho_from^2 - lambda L Q|Q| / (D a^2 A^2)``.
    Returns ``{edge: (rho_from, Q)}``.
    """
    a = topo.sound_speed
    jids = [j.id for j in topo.junctions]
    fixed = {}
    for j in topo.junctions:
        if j.kind == "supply":
            fixed[j.id] = float(topo.profile_of(j.id).density(t_h))
    demand = {}
    for j in topo.junctions:
        if j.kind == "withdrawal":
            demand[j.id] = base_demand(topo.profile_of(j.id), t_h)
    if not fixed:
        if rho_ref is None:
            raise ConfigError("a network without supply junctions needs initial.rho", "initial")
        fixed[jids[0]] = float(rho_ref)
        if abs(sum(demand.values())) > 1e-12 * (1 + sum(abs(v) for v in demand.values())):
            raise ConfigError("withdrawals do not balance and there is no supply", "initial")
    free = [j for j in jids if j not in fixed]
    balance_nodes = [j for j in jids if j not in fixed]
    edges = topo.edges
    ne = len(edges)
    col = {j: i for i, j in enumerate(free)}
    k = np.array([e.params.friction * e.params.length / (e.params.diameter * a * a * e.params.area**2) for e in edges])
    ref = max(fixed.values())

    inc = np.zeros((len(balance_nodes), ne))
    row = {j: i for i, j in enumerate(balance_nodes)}
    for m, e in enumerate(edges):
        if e.target in row:
            inc[row[e.target], m] += 1.0
        if e.source in row:
            inc[row[e.source], m] -= 1.0
    d = np.array([demand.get(j, 0.0) for j in balance_nodes])

    def rho_of(z, j):
        return fixed[j] if j in fixed else z[col[j]]

    def residual(z):
        Q = z[len(free):]
        r_edge = np.array(
            [(rho_of(z, e.source) ** 2 - rho_of(z, e.target) ** 2 - k[m] * Q[m] * abs(Q[m])) / ref**2
             for m, e in enumerate(edges)]
        )
        scale = 1.0 + np.abs(d).max() if len(d) else 1.0
        return np.concatenate([r_edge, (inc @ Q - d) / scale])

    Q0 = np.linalg.lstsq(inc, d, rcond=None)[0] if len(balance_nodes) else np.zeros(ne)
    z0 = np.concatenate([np.full(len(free), ref), Q0])
    sol = optimize.root(residual, z0, method="hybr")
    z = sol.x
    if not np.all(np.abs(residual(z)) < 1e-10):
        sol = optimize.least_squares(residual, z0, xtol=1e-15, ftol=1e-15, gtol=1e-15)
        z = sol.x
        if not np.all(np.abs(residual(z)) < 1e-9):
            raise SolverError("steady-state initialisation did not converge")
    out = {}
    for m, e in enumerate(edges):
        rho_in = rho_of(z, e.source)
        if not rho_in > 0 or rho_in**2 - k[m] * z[len(free) + m] * abs(z[len(free) + m]) <= 0:
            raise SolverError(f"steady state has nonpositive density on edge {e.id}")
        out[e.id] = (float(rho_in), float(z[len(free) + m]))
    return out


def steady_profile_averages(rho_in: float, Q: float, params, xl, xh, nodes: int = 8):
    """Cell averages of the steady density ``sqrt(rho_in^2 - k x)`` and flux."""
    a = params.sound_speed
    kx = params.friction * Q * abs(Q) / (params.diameter * a * a * params.area**2)
    gx, gw = gauss_legendre(nodes)
    x = 0.5 * (xl + xh)[:, None] + 0.5 * (xh - xl)[:, None] * gx[None, :]
    rho = np.sqrt(rho_in**2 - kx * x) @ (0.5 * gw)
    return rho, np.full_like(rho, Q / params.area)


def initialize(cfg: RunConfig, meshes: Mapping[str, CellSet]) -> None:
    init = cfg.initial
    if init.get("kind", "steady") == "uniform":
        rho = float(init.get("rho", 50.0))
        q = float(init.get("q", 0.0))
        for m in meshes.values():
            m.U[m.leaves()] = (rho, q)
        return
    state = steady_state(cfg.topo, 0.0, init.get("rho"))
    for e in cfg.topo.edges:
        m = meshes[e.id]
        ids = m.leaves()
        xl, xh = m.x_bounds(ids)
        rho, q = steady_profile_averages(*state[e.id], e.params, xl, xh)
        m.U[ids, 0] = rho
        m.U[ids, 1] = q


# ---------------------------------------------------------------------- time loop
@dataclass
class AdaptRecord:
    time_h: float
    result: NetworkAdaptation
    partitions_equal: bool
    dof: int


class Simulation:
    """SFV run on the configured network.

    ``measure`` replaces the stochastic space (e.g. a :class:`PointMeasure`
    for one deterministic realisation); ``ny`` overrides the stochastic root
    grid; ``adaptivity`` overrides the configured adaptation (``False``
    disables it).
    """

    def __init__(self, cfg: RunConfig, measure=None, ny=None, adaptivity=None, nx=None, initial=True):
        self.cfg = cfg
        self.topo = cfg.topo
        self.measure = cfg.space if measure is None else measure
        if isinstance(self.measure, PointMeasure):
            ny = (1,) * self.measure.ndim
        ny = cfg.ny if ny is None else ((ny,) * self.measure.ndim if np.isscalar(ny) else tuple(ny))
        self.adaptivity = cfg.adaptivity if adaptivity is None else (adaptivity or None)
        nx = dict(cfg.nx) if nx is None else dict(nx)
        self.meshes = {
            e.id: build_initial_mesh(e.id, e.params, self.measure, nx[e.id], ny) for e in self.topo.edges
        }
        if initial:
            initialize(cfg, self.meshes)
        self.t = 0.0  # seconds
        self.steps = 0
        self.dof_steps = 0
        self.adapt_records: list[AdaptRecord] = []
        self.track_balance = False
        self.max_balance_residual = 0.0
        self._disc: Discretization | None = None
        self._disc_versions: tuple = ()

    # -------------------------------------------------------------- helpers
    @property
    def dof(self) -> int:
        return sum(m.num_leaves for m in self.meshes.values())

    @property
    def discretization(self) -> Discretization:
        versions = tuple(m.version for m in self.meshes.values())
        if self._disc is None or versions != self._disc_versions:
            self._invalidate()
            self._disc = compile_network(self.topo, self.meshes, self.cfg.solver.order)
            self._disc_versions = versions
            if self.track_balance:
                self._disc.record = {"balance": 0.0}
        return self._disc

    def nominal_dt(self) -> float:
        return self.discretization.stable_dt(self.cfg.solver.cfl)

    def adapt(self, dt: float | None = None) -> AdaptRecord:
        if self.adaptivity is None:
            raise SolverError("adaptivity is disabled")
        if dt is None:
            dt = self.nominal_dt()
        res = adapt_network(self.topo, self.meshes, self.adaptivity, dt)
        rec = AdaptRecord(self.t / SECONDS_PER_HOUR, res, partitions_agree(self.topo, self.meshes), self.dof)
        self.adapt_records.append(rec)
        return rec

    def _invalidate(self):
        if self._disc is not None and self.track_balance:
            self.max_balance_residual = max(self.max_balance_residual, self._disc.record.get("balance", 0.0))
        self._disc = None

    def probe_values(self, probe: ProbeSpec):
        cells = self.meshes[probe.edge]
        return probe_slice(cells, probe.position * cells.length)

    def probe_moments(self, probe: ProbeSpec):
        return moments(self.probe_values(probe))

    # -------------------------------------------------------------- stepping
    def advance(self, t_end_h: float, on_output: Callable | None = None, output_times_h=None, max_dt=None):
        """Step to ``t_end_h``, landing exactly on every output time."""
        T = t_end_h * SECONDS_PER_HOUR
        outs = [] if output_times_h is None else [t * SECONDS_PER_HOUR for t in output_times_h]
        outs = [t for t in sorted(outs) if t >= self.t - 1e-9]
        if self.adaptivity is not None and self.steps == 0 and not self.adapt_records:
            self.adapt()
        if outs and abs(outs[0] - self.t) <= 1e-9 and on_output is not None:
            on_output(self)
            outs = outs[1:]
        op = self.cfg.solver.operator
        while self.t < T - 1e-9:
            disc = self.discretization
            dt = disc.stable_dt(self.cfg.solver.cfl)
            if max_dt is not None:
                dt = min(dt, max_dt)
            target = min([T] + [t for t in outs if t > self.t + 1e-9])
            landing = self.t + dt >= target - 1e-9 * dt
            if landing:
                dt = target - self.t
            U = disc.gather(self.meshes)
            U = ssp_rk3_step(disc, U, self.t, dt, op)
            disc.scatter(U, self.meshes)
            self.t = target if landing else self.t + dt
            self.steps += 1
            self.dof_steps += disc.n
            if self.adaptivity is not None and self.steps % self.adaptivity.cadence == 0:
                self.adapt()
            if outs and abs(self.t - outs[0]) <= 1e-9 and on_output is not None:
                on_output(self)
            outs = [t for t in outs if t > self.t + 1e-9]
        self._invalidate()
        return self


@dataclass
class ProbeRecorder:
    """Collects moments (every output time) and slices (density times)."""

    probes: tuple[ProbeSpec, ...]
    density_times_h: tuple[float, ...] = ()
    times: list = field(default_factory=list)
    means: dict = field(default_factory=dict)
    variances: dict = field(default_factory=dict)
    slices: dict = field(default_factory=dict)

    def __call__(self, sim: Simulation):
        t_h = sim.t / SECONDS_PER_HOUR
        self.times.append(t_h)
        for p in self.probes:
            sl = sim.probe_values(p)
            mean, var = moments(sl)
            self.means.setdefault(p.name, []).append(mean)
            self.variances.setdefault(p.name, []).append(var)
            if any(abs(t_h - s) < 1e-9 for s in self.density_times_h):
                self.slices[(p.name, _time_key(t_h))] = sl

    def series(self, name: str):
        return np.array(self.times), np.array(self.means[name]), np.array(self.variances[name])


def _time_key(t_h: float) -> float:
    return round(float(t_h), 9)


def run_sfv(cfg: RunConfig, t_end_h: float | None = None, **kwargs) -> tuple[Simulation, ProbeRecorder]:
    t_end = cfg.t_end_h if t_end_h is None else t_end_h
    sim = Simulation(cfg, **kwargs)
    rec = ProbeRecorder(cfg.probes, cfg.output.density_times_h)
    sim.advance(t_end, rec, cfg.output_times_h(t_end))
    return sim, rec

