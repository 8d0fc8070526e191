import numpy as np
import pytest

from sfvnet.network import load_toml
from sfvnet.simulation import bundled_example_path, parse_run_config

MINIMAL = """
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
"""


@pytest.fixture
def minimal_text():
    return MINIMAL


@pytest.fixture(scope="session")
def example_doc():
    return load_toml(bundled_example_path())


@pytest.fixture
def example_cfg(example_doc):
    return parse_run_config(example_doc)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from support import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
