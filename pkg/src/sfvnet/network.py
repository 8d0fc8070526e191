"""Pipe network description: junctions, pipes, boundary profiles.

Networks are read from TOML text. A minimal two-junction example::

    [network]
    junctions = [
        {id = "S", kind = "supply", profile = "src"},
        {id = "T", kind = "withdrawal", profile = "demand"},
    ]
    edges = [{id = "P1", from = "S", to = "T"}]

    [edge.P1]
    length_m = 10000.0
    diameter_m = 0.5
    friction = 0.01
    sound_speed_mps = 340.0

    [profiles.src]
    kind = "supply_density"
    times_h = [0.0]
    values = [50.0]

    [profiles.demand]
    kind = "withdrawal_flux"
    times_h = [0.0]
    values = [30.0]

Withdrawal values are mass flow rates in kg/s taken out of the network at the
junction; supply values are densities in kg/m^3.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import tomli_w

JUNCTION_KINDS = ("supply", "withdrawal", "internal")


class ConfigError(ValueError):
    """Invalid configuration; ``location`` names the offending entry."""

    def __init__(self, message: str, location: str = ""):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    location: str = ""

    def __str__(self) -> str:
        return f"{self.location}: {self.code}: {self.message}"


@dataclass(frozen=True)
class PipeParams:
    """Physical parameters of one pipe (SI units).

    ``area`` defaults to the circular cross-section pi*D^2/4.
    """

    length: float
    diameter: float
    friction: float
    sound_speed: float
    area: float = float("nan")

    def __post_init__(self):
        if math.isnan(self.area):
            object.__setattr__(self, "area", math.pi * self.diameter**2 / 4.0)

    @property
    def friction_coefficient(self) -> float:
        """lambda / (2 D), the factor in front of q|q|/rho."""
        return self.friction / (2.0 * self.diameter)


@dataclass(frozen=True)
class Table:
    """Piecewise-linear time table, constant beyond its end points."""

    times_h: tuple[float, ...]
    values: tuple[float, ...]

    @classmethod
    def constant(cls, value: float) -> Table:
        return cls((0.0,), (float(value),))

    def __call__(self, t_h):
        return np.interp(t_h, self.times_h, self.values)

    def to_dict(self) -> dict:
        return {"times_h": list(self.times_h), "values": list(self.values)}


@dataclass(frozen=True)
class SupplyProfile:
    name: str
    density: Table

    kind = "supply_density"


@dataclass(frozen=True)
class WithdrawalProfile:
    """Withdrawal (kg/s) at a junction.

    Without ``d2`` the profile is the deterministic table ``d1``. With ``d2``,
    ``tau_dim`` names the random dimension holding the event onset (hours) and
    ``offsets_h`` = (D1, D2, D3) place the end of the ramp up, the start of
    the ramp down and the end of the ramp down relative to the onset.
    """

    name: str
    d1: Table
    d2: Table | None = None
    tau_dim: str | None = None
    offsets_h: tuple[float, float, float] | None = None

    kind = "withdrawal_flux"

    @property
    def is_stochastic(self) -> bool:
        return self.d2 is not None


def withdrawal_rate(t, tau, profile: WithdrawalProfile):
    """Withdrawal at time ``t`` (hours) for an event starting at ``tau`` (hours).

    Vectorised over broadcastable ``t`` and ``tau``. Before ``tau`` and after
    the last offset the base table ``d1`` applies, between the first two
    offsets the elevated table ``d2``, with linear blends on the two ramps.
    """
    t = np.asarray(t, dtype=float)
    base = profile.d1(t)
    if not profile.is_stochastic:
        return np.broadcast_to(base, np.broadcast(t, np.asarray(tau)).shape).copy()
    tau = np.asarray(tau, dtype=float)
    t, tau = np.broadcast_arrays(t, tau)
    base = np.asarray(profile.d1(t), dtype=float)
    high = np.asarray(profile.d2(t), dtype=float)
    off1, off2, off3 = profile.offsets_h
    t1, t2, t3 = tau + off1, tau + off2, tau + off3
    up = base + (t - tau) / off1 * (high - base)
    down = high + (t - t2) / (off3 - off2) * (base - high)
    return np.select(
        [t < tau, t < t1, t < t2, t < t3],
        [base, up, high, down],
        default=base,
    )


@dataclass(frozen=True)
class Junction:
    id: str
    kind: str
    profile: str | None = None


@dataclass(frozen=True)
class Edge:
    id: str
    source: str
    target: str
    params: PipeParams


@dataclass(frozen=True)
class NetworkTopology:
    junctions: tuple[Junction, ...]
    edges: tuple[Edge, ...]
    profiles: Mapping[str, SupplyProfile | WithdrawalProfile] = field(default_factory=dict)

    def junction(self, jid: str) -> Junction:
        for j in self.junctions:
            if j.id == jid:
                return j
        raise KeyError(jid)

    def edge(self, eid: str) -> Edge:
        for e in self.edges:
            if e.id == eid:
                return e
        raise KeyError(eid)

    def incident(self, jid: str) -> list[tuple[Edge, str]]:
        """Edges at ``jid`` with orientation ``"in"`` (edge ends there) or ``"out"``."""
        out = []
        for e in self.edges:
            if e.target == jid:
                out.append((e, "in"))
            if e.source == jid:
                out.append((e, "out"))
        return out

    def profile_of(self, jid: str):
        j = self.junction(jid)
        return self.profiles[j.profile] if j.profile is not None else None

    @property
    def sound_speed(self) -> float:
        return self.edges[0].params.sound_speed


def validate_topology(topo: NetworkTopology) -> list[Diagnostic]:
    """Check the network invariants; returns an empty list for a valid network."""
    diags: list[Diagnostic] = []
    ids = [j.id for j in topo.junctions]
    known = set(ids)
    if len(known) != len(ids):
        diags.append(Diagnostic("duplicate id", "junction ids are not unique", "network.junctions"))
    eids = [e.id for e in topo.edges]
    if len(set(eids)) != len(eids):
        diags.append(Diagnostic("duplicate id", "edge ids are not unique", "network.edges"))
    if not topo.edges:
        diags.append(Diagnostic("empty network", "no edges", "network.edges"))

    for e in topo.edges:
        for end in (e.source, e.target):
            if end not in known:
                diags.append(
                    Diagnostic("dangling junction reference", f"unknown junction {end!r}", f"edge.{e.id}")
                )
        p = e.params
        for name in ("length", "diameter", "sound_speed", "area"):
            value = getattr(p, name)
            if not (value > 0):
                diags.append(Diagnostic("nonpositive parameter", f"{name} = {value}", f"edge.{e.id}"))
        if not (p.friction >= 0):
            diags.append(Diagnostic("nonpositive parameter", f"friction = {p.friction}", f"edge.{e.id}"))

    speeds = {e.params.sound_speed for e in topo.edges}
    if len(speeds) > 1:
        diags.append(Diagnostic("sound speed mismatch", f"edges use {sorted(speeds)}", "edge"))

    for j in topo.junctions:
        loc = f"network.junctions.{j.id}"
        if j.kind not in JUNCTION_KINDS:
            diags.append(Diagnostic("unknown junction kind", repr(j.kind), loc))
            continue
        if j.kind == "internal":
            continue
        prof = topo.profiles.get(j.profile) if j.profile is not None else None
        want = SupplyProfile if j.kind == "supply" else WithdrawalProfile
        if not isinstance(prof, want):
            diags.append(
                Diagnostic("missing boundary profile", f"{j.kind} junction needs a {want.kind} profile", loc)
            )
    for prof in topo.profiles.values():
        if isinstance(prof, WithdrawalProfile) and prof.is_stochastic:
            o = prof.offsets_h
            if o is None or not (0 < o[0] < o[1] < o[2]):
                diags.append(
                    Diagnostic("offsets not increasing", f"offsets_h = {o}", f"profiles.{prof.name}")
                )

    # connectivity over valid references only
    adj: dict[str, set[str]] = {jid: set() for jid in known}
    for e in topo.edges:
        if e.source in known and e.target in known:
            adj[e.source].add(e.target)
            adj[e.target].add(e.source)
    if ids:
        seen = {ids[0]}
        todo = deque([ids[0]])
        while todo:
            for nxt in adj[todo.popleft()]:
                if nxt not in seen:
                    seen.add(nxt)
                    todo.append(nxt)
        if seen != known:
            missing = sorted(known - seen)
            diags.append(Diagnostic("disconnected graph", f"unreachable junctions {missing}", "network"))
    return diags


def _table(raw: Any, loc: str) -> Table:
    if isinstance(raw, (int, float)):
        return Table.constant(raw)
    if not isinstance(raw, Mapping) or "times_h" not in raw or "values" not in raw:
        raise ConfigError("expected a number or {times_h, values} table", loc)
    times = tuple(float(v) for v in raw["times_h"])
    values = tuple(float(v) for v in raw["values"])
    if len(times) != len(values) or not times:
        raise ConfigError("times_h and values must be nonempty and of equal length", loc)
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ConfigError("times_h must be strictly increasing", loc)
    return Table(times, values)


def _require(section: Mapping, key: str, loc: str):
    if key not in section:
        raise ConfigError(f"missing key {key!r}", loc)
    return section[key]


def _parse_profile(name: str, raw: Mapping) -> SupplyProfile | WithdrawalProfile:
    loc = f"profiles.{name}"
    kind = _require(raw, "kind", loc)
    if kind == "supply_density":
        return SupplyProfile(name, _table(raw, loc))
    if kind != "withdrawal_flux":
        raise ConfigError(f"unknown profile kind {kind!r}", loc)
    if "d2" not in raw:
        src = raw["d1"] if "d1" in raw else raw
        return WithdrawalProfile(name, _table(src, loc))
    offsets = _require(raw, "offsets_h", loc)
    if len(offsets) != 3:
        raise ConfigError("offsets_h needs exactly three entries", loc)
    return WithdrawalProfile(
        name,
        d1=_table(_require(raw, "d1", loc), f"{loc}.d1"),
        d2=_table(raw["d2"], f"{loc}.d2"),
        tau_dim=str(_require(raw, "tau_dim", loc)),
        offsets_h=tuple(float(v) for v in offsets),
    )


def network_from_dict(doc: Mapping) -> NetworkTopology:
    """Build and validate a topology from an already parsed config mapping."""
    net = _require(doc, "network", "")
    junctions = []
    for i, raw in enumerate(_require(net, "junctions", "network")):
        loc = f"network.junctions[{i}]"
        if not isinstance(raw, Mapping):
            raise ConfigError("expected a table", loc)
        junctions.append(
            Junction(str(_require(raw, "id", loc)), str(raw.get("kind", "internal")), raw.get("profile"))
        )
    edge_params = doc.get("edge", {})
    edges = []
    for i, raw in enumerate(_require(net, "edges", "network")):
        loc = f"network.edges[{i}]"
        if not isinstance(raw, Mapping):
            raise ConfigError("expected a table", loc)
        eid = str(_require(raw, "id", loc))
        ploc = f"edge.{eid}"
        praw = edge_params.get(eid)
        if praw is None:
            raise ConfigError("missing pipe parameters", ploc)
        try:
            params = PipeParams(
                length=float(_require(praw, "length_m", ploc)),
                diameter=float(_require(praw, "diameter_m", ploc)),
                friction=float(_require(praw, "friction", ploc)),
                sound_speed=float(_require(praw, "sound_speed_mps", ploc)),
                area=float(praw.get("area_m2", float("nan"))),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc), ploc) from None
        edges.append(Edge(eid, str(_require(raw, "from", loc)), str(_require(raw, "to", loc)), params))
    profiles = {name: _parse_profile(name, raw) for name, raw in doc.get("profiles", {}).items()}
    topo = NetworkTopology(tuple(junctions), tuple(edges), profiles)
    diags = validate_topology(topo)
    if diags:
        first = diags[0]
        raise ConfigError("; ".join(f"{d.code}: {d.message}" for d in diags), first.location)
    return topo


def parse_network(config_text: str) -> NetworkTopology:
    """Parse TOML network text into a validated topology."""
    try:
        doc = tomllib.loads(config_text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"schema violation: {exc}") from None
    return network_from_dict(doc)


def network_to_dict(topo: NetworkTopology) -> dict:
    junctions = []
    for j in topo.junctions:
        entry = {"id": j.id, "kind": j.kind}
        if j.profile is not None:
            entry["profile"] = j.profile
        junctions.append(entry)
    doc: dict[str, Any] = {
        "network": {
            "junctions": junctions,
            "edges": [{"id": e.id, "from": e.source, "to": e.target} for e in topo.edges],
        },
        "edge": {
            e.id: {
                "length_m": e.params.length,
                "diameter_m": e.params.diameter,
                "friction": e.params.friction,
                "sound_speed_mps": e.params.sound_speed,
                "area_m2": e.params.area,
            }
            for e in topo.edges
        },
    }
    profiles = {}
    for name, p in topo.profiles.items():
        if isinstance(p, SupplyProfile):
            profiles[name] = {"kind": p.kind, **p.density.to_dict()}
        elif p.is_stochastic:
            profiles[name] = {
                "kind": p.kind,
                "d1": p.d1.to_dict(),
                "d2": p.d2.to_dict(),
                "tau_dim": p.tau_dim,
                "offsets_h": list(p.offsets_h),
            }
        else:
            profiles[name] = {"kind": p.kind, **p.d1.to_dict()}
    if profiles:
        doc["profiles"] = profiles
    return doc


def emit_network(topo: NetworkTopology) -> str:
    """Serialise a topology back to TOML text accepted by :func:`parse_network`."""
    return tomli_w.dumps(network_to_dict(topo))


def load_toml(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def stochastic_dims_used(topo: NetworkTopology) -> Sequence[str]:
    return sorted(
        {p.tau_dim for p in topo.profiles.values() if isinstance(p, WithdrawalProfile) and p.is_stochastic}
    )
