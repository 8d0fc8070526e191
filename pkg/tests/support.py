"""Small network fixtures shared by the solver-level tests."""

import sys

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from sfvnet.mesh import CellSet
from sfvnet.network import Edge, Junction, NetworkTopology, PipeParams, SupplyProfile, Table, WithdrawalProfile
from sfvnet.solver import compile_network
from sfvnet.stochastic import RandomDimension, StochasticSpace

# one verdict line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record_verdict(number: int, title: str, passed: bool, detail: str) -> bool:
    line = f"acceptance {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE[number] = line
    return passed


TAU = StochasticSpace([RandomDimension.uniform("tau", 4.0, 12.0)])
A = 340.0


def closed_pipe(length=10000.0, friction=0.0, diameter=0.5):
    """One pipe between two zero-withdrawal ends, i.e. reflecting walls."""
    pipe = PipeParams(length, diameter, friction, A)
    zero = WithdrawalProfile("zero", Table.constant(0.0))
    return NetworkTopology(
        (Junction("L", "withdrawal", "zero"), Junction("R", "withdrawal", "zero")),
        (Edge("P", "L", "R", pipe),),
        {"zero": zero},
    )


def ring(length=5000.0, friction=0.0):
    """Two equal pipes joined head to tail at two internal junctions."""
    pipe = PipeParams(length, 0.5, friction, A)
    return NetworkTopology(
        (Junction("J1", "internal"), Junction("J2", "internal")),
        (Edge("P1", "J1", "J2", pipe), Edge("P2", "J2", "J1", pipe)),
        {},
    )


def two_pipes(length, join="internal", profile=None):
    """Supply -> pipe -> junction ``M`` -> pipe -> withdrawal."""
    pipe = PipeParams(length, 0.5, 0.01, A)
    profiles = {
        "src": SupplyProfile("src", Table.constant(50.0)),
        "sink": WithdrawalProfile("sink", Table.constant(20.0)),
    }
    if profile is not None:
        profiles["mid"] = profile
    return NetworkTopology(
        (Junction("S", "supply", "src"), Junction("M", join, "mid" if profile else None), Junction("T", "withdrawal", "sink")),
        (Edge("P1", "S", "M", pipe), Edge("P2", "M", "T", pipe)),
        profiles,
    )


def one_pipe(length):
    """The same supply and withdrawal joined by one pipe."""
    pipe = PipeParams(length, 0.5, 0.01, A)
    return NetworkTopology(
        (Junction("S", "supply", "src"), Junction("T", "withdrawal", "sink")),
        (Edge("P", "S", "T", pipe),),
        {"src": SupplyProfile("src", Table.constant(50.0)), "sink": WithdrawalProfile("sink", Table.constant(20.0))},
    )


def fill(meshes, length):
    """Smooth state in the coordinate of the joined pipe; ``P2`` starts at ``length``."""
    for m in meshes.values():
        ids, xc = centres(m)
        off = length if m.edge_id == "P2" else 0.0
        m.U[ids, 0] = 50.0 + 2.0 * np.sin((xc + off) / 700.0)
        m.U[ids, 1] = 100.0 + 30.0 * np.cos((xc + off) / 900.0)


def uniform_meshes(topo, nx, ny=1, space=TAU):
    return {e.id: CellSet(e.id, e.params.length, space, nx, ny) for e in topo.edges}


def centres(cells):
    ids = cells.leaves()
    xl, xh = cells.x_bounds(ids)
    return ids, 0.5 * (xl + xh)


def compiled(topo, meshes, order=3):
    disc = compile_network(topo, meshes, order)
    return disc, disc.gather(meshes)


def gaussian_average(xl, xh, centre, width, amplitude, nodes=8):
    """Cell averages of amplitude*exp(-((x-centre)/width)^2) by Gauss-Legendre.

    ``centre`` is a scalar or one value per cell.
    """
    gx, gw = np.polynomial.legendre.leggauss(nodes)
    x = 0.5 * (xl + xh)[:, None] + 0.5 * (xh - xl)[:, None] * gx[None, :]
    c = np.asarray(centre, dtype=float)
    c = c[:, None] if c.ndim else c
    return 0.5 * amplitude * np.exp(-(((x - c) / width) ** 2)) @ gw


SMALL_EVENT = """
[network]
junctions = [
    {id = "S", kind = "supply", profile = "src"},
    {id = "T", kind = "withdrawal", profile = "event"},
]
edges = [{id = "P", from = "S", to = "T"}]

[edge.P]
length_m = 6000.0
diameter_m = 0.5
friction = 0.01
sound_speed_mps = 340.0

[profiles.src]
kind = "supply_density"
times_h = [0.0]
values = [50.0]

[profiles.event]
kind = "withdrawal_flux"
d1 = 20.0
d2 = 35.0
tau_dim = "tau"
offsets_h = [0.5, 1.0, 1.5]

[stochastic.tau]
dist = "uniform"
lo = 1.0
hi = 3.0

[run]
t_end_h = 4.0
cfl = 0.9

[mesh]
dx_m = 1500.0
ny = 4

[adaptivity]
enabled = false

[[probes]]
name = "mid"
edge = "P"
position = 0.5

[output]
snapshot_every_h = 0.5
density_times_h = [2.5]

[mc]
samples = 32
seed = 7
chunk = 8
"""


def small_event_doc():
    return tomllib.loads(SMALL_EVENT)
