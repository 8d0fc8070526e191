import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from sfvnet.cli import (
    EXIT_CONFIG,
    EXIT_FAILED,
    EXIT_IO,
    EXIT_OK,
    EXIT_SOLVER,
    apply_overrides,
    main,
    read_csv,
    time_tag,
    write_csv,
)
from sfvnet.network import ConfigError
from support import SMALL_EVENT

FIXED = SMALL_EVENT.replace(
    """kind = "withdrawal_flux"
d1 = 20.0
d2 = 35.0
tau_dim = "tau"
offsets_h = [0.5, 1.0, 1.5]""",
    """kind = "withdrawal_flux"
times_h = [0.0, 1.0]
values = [20.0, 30.0]""",
)


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "event.toml"
    path.write_text(SMALL_EVENT)
    return path


@pytest.fixture
def fixed_config(tmp_path):
    path = tmp_path / "fixed.toml"
    path.write_text(FIXED)
    return path


def moments(path):
    return read_csv(path)[1]


class TestHelpers:
    def test_time_tag(self):
        assert time_tag(12.0) == "12h" and time_tag(0.25) == "0.25h"

    def test_csv_round_trip(self, tmp_path):
        rows = [[0.1, 1 / 3], [2.0, -1e-300]]
        write_csv(tmp_path / "x.csv", ["a", "b"], rows)
        header, data = read_csv(tmp_path / "x.csv")
        assert header == ["a", "b"] and data.tolist() == rows

    def test_overrides(self):
        doc = apply_overrides({"run": {"t_end_h": 5.0}}, t_end=1.0, tol=1e-3, cfl=0.5, adapt="off", stochastic_cells=3)
        assert doc["run"] == {"t_end_h": 1.0, "cfl": 0.5}
        assert doc["adaptivity"] == {"enabled": False, "tolerance": 1e-3, "max_level_y": 0}
        assert doc["mesh"]["ny"] == 3
        with pytest.raises(ConfigError):
            apply_overrides({}, stochastic_cells=0)


class TestSimulate:
    def test_initial_snapshot_only(self, config, tmp_path):
        out = tmp_path / "t0"
        assert main(["simulate", "--config", str(config), "--t-end", "0", "--out", str(out)]) == EXIT_OK
        assert moments(out / "moments_mid.csv").shape == (1, 5)
        assert [p.name for p in (out / "mesh").iterdir()] == ["mesh_0h.csv"]

    def test_outputs(self, config, tmp_path):
        out = tmp_path / "run"
        assert main(["simulate", "--config", str(config), "--t-end", "3", "--out", str(out)]) == EXIT_OK
        names = {p.name for p in out.iterdir()}
        expected = {
            "moments_mid.csv", "density_mid_2.5h.csv", "density2d_mid_2.5h.csv", "atoms_mid_2.5h.csv",
            "adaptation_log.csv", "config.toml", "manifest.toml", "run_info.toml", "mesh",
        }
        assert expected <= names
        m = moments(out / "moments_mid.csv")
        assert m[:, 0].tolist() == [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0]
        assert np.all(m[:, [2, 4]] >= 0.0)
        _, dens = read_csv(out / "density_mid_2.5h.csv")
        assert dens[:, 2].sum() == pytest.approx(1.0, abs=1e-12)
        _, atoms = read_csv(out / "atoms_mid_2.5h.csv")
        assert atoms[:, 0].sum() == pytest.approx(1.0, abs=1e-12)

    def test_rerun_from_saved_config(self, config, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["simulate", "--config", str(config), "--t-end", "1", "--out", str(a)]) == EXIT_OK
        assert main(["simulate", "--config", str(a / "config.toml"), "--out", str(b)]) == EXIT_OK
        assert (a / "moments_mid.csv").read_bytes() == (b / "moments_mid.csv").read_bytes()

    def test_single_stochastic_cell(self, config, tmp_path):
        out = tmp_path / "det"
        args = ["simulate", "--config", str(config), "--t-end", "3", "--stochastic-cells", "1", "--out", str(out)]
        assert main(args) == EXIT_OK
        m = moments(out / "moments_mid.csv")
        assert np.all(m[:, [2, 4]] == 0.0)


class TestMc:
    def test_byte_identical(self, config, tmp_path):
        dirs = [tmp_path / "a", tmp_path / "b"]
        for d in dirs:
            assert main(["mc", "--config", str(config), "--samples", "16", "--seed", "4", "--out", str(d), "--t-end", "3"]) == EXIT_OK
        files = sorted(p.name for p in dirs[0].iterdir() if p.name != "run_info.toml")
        assert "mc_moments_mid.csv" in files and "mc_samples_mid_2.5h.csv" in files
        for name in files:
            assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes(), name

    def test_stderr_columns(self, config, tmp_path):
        out = tmp_path / "mc"
        assert main(["mc", "--config", str(config), "--samples", "8", "--seed", "1", "--out", str(out), "--t-end", "3"]) == EXIT_OK
        header, data = read_csv(out / "mc_moments_mid.csv")
        assert header[5:] == ["stderr_mean_rho", "stderr_var_rho", "stderr_mean_q", "stderr_var_q"]
        late = data[:, 0] > 2.0
        assert np.all(data[late, 5] > 0)
        dheader, _ = read_csv(out / "mc_density_mid_2.5h.csv")
        assert "stderr" in dheader

    @pytest.mark.slow
    def test_stderr_shrinks_with_samples(self, config, tmp_path):
        se = []
        for n in (100, 1000):
            out = tmp_path / f"n{n}"
            assert main(["mc", "--config", str(config), "--samples", str(n), "--seed", "2", "--out", str(out), "--t-end", "2.5"]) == EXIT_OK
            _, data = read_csv(out / "mc_moments_mid.csv")
            se.append(data[-1, 5])
        assert se[0] / se[1] == pytest.approx(np.sqrt(10.0), rel=0.2)


def as_sfv_dir(mc_dir, target):
    """Lay out Monte Carlo output with the SFV file names (equal-weight atoms)."""
    target.mkdir()
    header, data = read_csv(mc_dir / "mc_moments_mid.csv")
    write_csv(target / "moments_mid.csv", header[:5], data[:, :5].tolist())
    _, samples = read_csv(mc_dir / "mc_samples_mid_2.5h.csv")
    p = np.full(len(samples), 1.0 / len(samples))
    write_csv(target / "atoms_mid_2.5h.csv", ["p", "rho", "q"], np.column_stack([p, samples]).tolist())
    return target


class TestCompare:
    @pytest.fixture
    def mc_dir(self, config, tmp_path):
        out = tmp_path / "mc"
        assert main(["mc", "--config", str(config), "--samples", "16", "--seed", "3", "--out", str(out), "--t-end", "3"]) == EXIT_OK
        return out

    def test_against_itself(self, mc_dir, tmp_path):
        sfv = as_sfv_dir(mc_dir, tmp_path / "self")
        report = tmp_path / "report.json"
        assert main(["compare", "--sfv", str(sfv), "--mc", str(mc_dir), "--report", str(report)]) == EXIT_OK
        rep = json.loads(report.read_text())
        assert rep["pass"]
        for row in rep["rows"]:
            assert row["d_mean_rho"] == row["d_var_rho"] == row["d_mean_q"] == row["d_var_q"] == 0.0
            assert row.get("l1_rho", 0.0) == 0.0

    def test_deterministic_vs_single_realisation(self, fixed_config, tmp_path):
        sfv, mc = tmp_path / "sfv", tmp_path / "mc1"
        assert main(["simulate", "--config", str(fixed_config), "--t-end", "3", "--stochastic-cells", "1", "--out", str(sfv)]) == EXIT_OK
        assert main(["mc", "--config", str(fixed_config), "--samples", "1", "--seed", "0", "--out", str(mc), "--t-end", "3"]) == EXIT_OK
        report = tmp_path / "r.json"
        assert main(["compare", "--sfv", str(sfv), "--mc", str(mc), "--report", str(report)]) == EXIT_OK
        assert all(r["d_mean_rho"] == 0.0 and r["d_mean_q"] == 0.0 for r in json.loads(report.read_text())["rows"])

    def test_failed_comparison(self, config, mc_dir, tmp_path):
        sfv = tmp_path / "sfv"
        assert main(["simulate", "--config", str(config), "--t-end", "3", "--stochastic-cells", "1", "--out", str(sfv)]) == EXIT_OK
        assert main(["compare", "--sfv", str(sfv), "--mc", str(mc_dir)]) == EXIT_FAILED

    def test_mismatched_probes(self, mc_dir, tmp_path):
        sfv = as_sfv_dir(mc_dir, tmp_path / "renamed")
        shutil.move(sfv / "moments_mid.csv", sfv / "moments_other.csv")
        assert main(["compare", "--sfv", str(sfv), "--mc", str(mc_dir)]) == EXIT_CONFIG


class TestExitCodes:
    def test_missing_config(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_schema_violation(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text(SMALL_EVENT.replace('dist = "uniform"', 'dist = "cauchy"'))
        assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_zero_samples(self, config, tmp_path):
        assert main(["mc", "--config", str(config), "--samples", "0", "--seed", "1", "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_solver_failure(self, tmp_path):
        drained = tmp_path / "drained.toml"
        drained.write_text(SMALL_EVENT.replace("d2 = 35.0", "d2 = 5000.0"))
        assert main(["simulate", "--config", str(drained), "--t-end", "3", "--out", str(tmp_path / "o")]) == EXIT_SOLVER

    def test_unwritable_output(self, config, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert main(["simulate", "--config", str(config), "--t-end", "0", "--out", str(blocker / "sub")]) == EXIT_IO


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "sfvnet.cli", "--help"], capture_output=True, text=True, check=True)
    assert "simulate" in out.stdout and "compare" in out.stdout
