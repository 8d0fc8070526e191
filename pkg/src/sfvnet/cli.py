"""Command-line driver: ``simulate``, ``mc`` and ``compare``.

Exit codes: 0 success, 1 comparison failed, 2 configuration error,
3 solver failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import platform
import sys
import time
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy
import tomli_w

from . import __version__
from .mc import McConfig, McResult, mc_statistics, worker_count
from .mesh import SNAPSHOT_COLUMNS
from .network import ConfigError, load_toml
from .simulation import ProbeRecorder, RunConfig, Simulation, _plain, _time_key, parse_run_config
from .solver import SECONDS_PER_HOUR, SolverError
from .statistics import StatisticsError, _kernel, common_l1, joint_density, push_forward_density

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 1, 2, 3, 4

MOMENT_COLUMNS = ["time_h", "mean_rho", "var_rho", "mean_q", "var_q"]
MC_MOMENT_COLUMNS = MOMENT_COLUMNS + ["stderr_mean_rho", "stderr_var_rho", "stderr_mean_q", "stderr_var_q"]
ADAPT_COLUMNS = ["time_h", "edge", "refined", "coarsened", "directions", "eta_before", "eta_after"]


# ---------------------------------------------------------------------- files
def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_csv(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(rows[0]))
    return rows[0], data


def time_tag(t_h: float) -> str:
    return f"{t_h:g}h"


def write_toml(path: Path, doc: Mapping) -> None:
    with open(path, "wb") as fh:
        tomli_w.dump(_plain(doc), fh)


def versions() -> dict:
    return {"sfvnet": __version__, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def write_density_files(out: Path, prefix: str, name: str, t_h: float, src, weights, bins: int, bandwidth: float, n=None):
    tag = time_tag(t_h)
    d = push_forward_density(src, "rho", bins=bins, bandwidth=bandwidth, weights=weights)
    e = d.edges[0]
    header = ["bin_lo", "bin_hi", "mass"]
    cols = [e[:-1], e[1:], d.masses]
    if n is not None:
        header.append("stderr")
        cols.append(_binned_stderr(src[:, 0], bins, bandwidth, e, n))
    write_csv(out / f"{prefix}density_{name}_{tag}.csv", header, zip(*cols))
    j = joint_density(src, bins=bins, bandwidth=bandwidth, weights=weights)
    er, eq = j.edges
    rows = []
    for a in range(j.masses.shape[0]):
        for b in range(j.masses.shape[1]):
            rows.append([er[a], er[a + 1], eq[b], eq[b + 1], j.masses[a, b]])
    write_csv(out / f"{prefix}density2d_{name}_{tag}.csv", ["rho_lo", "rho_hi", "q_lo", "q_hi", "mass"], rows)


def _binned_stderr(values, bins, bandwidth, edges, n):
    """Standard error of each (smoothed) bin mass of an empirical histogram."""
    raw = push_forward_density(values, bins=bins, bandwidth=0, value_range=(edges[0], edges[-1])).masses
    K = _kernel(len(raw), bandwidth) if bandwidth > 0 and len(raw) > 1 else np.eye(len(raw))
    second = (K**2) @ raw
    first = K @ raw
    return np.sqrt(np.maximum(second - first**2, 0.0) / n)


# ---------------------------------------------------------------------- config
def apply_overrides(doc: Mapping, t_end=None, tol=None, cfl=None, adapt=None, stochastic_cells=None) -> dict:
    """Copy of the config document with command-line overrides applied."""
    doc = copy.deepcopy(dict(doc))
    if t_end is not None:
        doc.setdefault("run", {})["t_end_h"] = float(t_end)
    if cfl is not None:
        doc.setdefault("run", {})["cfl"] = float(cfl)
    if adapt is not None:
        doc.setdefault("adaptivity", {})["enabled"] = adapt == "on"
    if tol is not None:
        doc.setdefault("adaptivity", {})["tolerance"] = float(tol)
    if stochastic_cells is not None:
        if stochastic_cells < 1:
            raise ConfigError("--stochastic-cells must be >= 1", "command line")
        doc.setdefault("mesh", {})["ny"] = int(stochastic_cells)
        doc.setdefault("adaptivity", {})["max_level_y"] = 0
    return doc


def _load_doc(path) -> dict:
    try:
        return load_toml(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", str(path)) from None
    except ValueError as exc:
        raise ConfigError(f"schema violation: {exc}", str(path)) from None


def _prepare_out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write_test"
    probe.write_text("")
    probe.unlink()
    return out


# ---------------------------------------------------------------------- simulate
def run_simulation(cfg: RunConfig, out: Path, config_path: str = "") -> Simulation:
    """SFV run with all declared outputs written to ``out``."""
    started = time.time()
    t_end = cfg.t_end_h
    times = cfg.output_times_h(t_end)
    snapshot_every = cfg.output.snapshot_every_h
    rec = ProbeRecorder(cfg.probes, cfg.output.density_times_h)
    mesh_dir = out / "mesh"
    if cfg.output.mesh_snapshots:
        mesh_dir.mkdir(exist_ok=True)

    def on_output(sim: Simulation):
        rec(sim)
        t_h = sim.t / SECONDS_PER_HOUR
        k = t_h / snapshot_every
        on_cadence = abs(k - round(k)) < 1e-9 or abs(t_h - t_end) < 1e-9
        if cfg.output.mesh_snapshots and on_cadence:
            rows = [r for e in cfg.topo.edges for r in sim.meshes[e.id].snapshot_rows()]
            write_csv(mesh_dir / f"mesh_{time_tag(t_h)}.csv", SNAPSHOT_COLUMNS, rows)

    sim = Simulation(cfg)
    sim.advance(t_end, on_output, times)

    for p in cfg.probes:
        t, m, v = rec.series(p.name)
        rows = [[t[k], m[k, 0], v[k, 0], m[k, 1], v[k, 1]] for k in range(len(t))]
        write_csv(out / f"moments_{p.name}.csv", MOMENT_COLUMNS, rows)
    for (name, t_h), sl in sorted(rec.slices.items()):
        write_density_files(out, "", name, t_h, sl, None, cfg.output.bins, cfg.output.bandwidth)
        rows = [[sl.p[i], sl.U[i, 0], sl.U[i, 1]] + list(sl.lo[i]) + list(sl.hi[i]) for i in range(len(sl))]
        dims = cfg.space.names
        write_csv(
            out / f"atoms_{name}_{time_tag(t_h)}.csv",
            ["p", "rho", "q"] + [f"{d}_lo" for d in dims] + [f"{d}_hi" for d in dims],
            rows,
        )
    log = []
    for r in sim.adapt_records:
        for e, ea in r.result.edges.items():
            hist = ";".join(f"{k}:{v}" for k, v in ea.direction_histogram().items())
            log.append([r.time_h, e, ea.refined, ea.coarsened, hist, ea.eta_before, ea.eta_after])
    write_csv(out / "adaptation_log.csv", ADAPT_COLUMNS, log)

    write_toml(out / "config.toml", cfg.doc)
    manifest = {
        "command": "simulate",
        "config_sha256": cfg.digest,
        "config_file": "config.toml",
        "source_config": str(config_path),
        "versions": versions(),
        "t_end_h": t_end,
        "steps": sim.steps,
        "dof_steps": sim.dof_steps,
        "final_dof": {e.id: sim.meshes[e.id].num_leaves for e in cfg.topo.edges},
        "probes": [p.name for p in cfg.probes],
        "density_times_h": [t for t in cfg.output.density_times_h if t <= t_end],
    }
    write_toml(out / "manifest.toml", manifest)
    write_toml(out / "run_info.toml", {"wall_time_s": time.time() - started, "finished_unix": time.time()})
    return sim


# ---------------------------------------------------------------------- mc
def write_mc_outputs(cfg: RunConfig, res: McResult, out: Path, seed: int) -> None:
    for p in cfg.probes:
        m, v, sm, sv = res.mean[p.name], res.var[p.name], res.se_mean[p.name], res.se_var[p.name]
        rows = [
            [res.times_h[k], m[k, 0], v[k, 0], m[k, 1], v[k, 1], sm[k, 0], sv[k, 0], sm[k, 1], sv[k, 1]]
            for k in range(len(res.times_h))
        ]
        write_csv(out / f"mc_moments_{p.name}.csv", MC_MOMENT_COLUMNS, rows)
        for t_h in cfg.output.density_times_h:
            if t_h > res.times_h[-1] + 1e-9:
                continue
            x = res.at(p.name, t_h)
            write_density_files(out, "mc_", p.name, t_h, x, None, cfg.output.bins, cfg.output.bandwidth, n=res.n)
            write_csv(out / f"mc_samples_{p.name}_{time_tag(t_h)}.csv", ["rho", "q"], x.tolist())


def run_mc(cfg: RunConfig, samples: int, seed: int, out: Path, config_path: str = "") -> McResult:
    started = time.time()
    mc = McConfig(samples=samples, seed=seed, chunk=cfg.mc.chunk)
    res = mc_statistics(cfg, mc, cfg.t_end_h)
    write_mc_outputs(cfg, res, out, seed)
    doc = copy.deepcopy(dict(cfg.doc))
    doc.setdefault("mc", {}).update({"samples": samples, "seed": seed})
    write_toml(out / "config.toml", doc)
    manifest = {
        "command": "mc",
        "config_sha256": cfg.digest,
        "config_file": "config.toml",
        "source_config": str(config_path),
        "versions": versions(),
        "t_end_h": cfg.t_end_h,
        "samples": samples,
        "seed": seed,
        "probes": [p.name for p in cfg.probes],
        "density_times_h": [t for t in cfg.output.density_times_h if t <= cfg.t_end_h],
    }
    write_toml(out / "manifest.toml", manifest)
    write_toml(
        out / "run_info.toml",
        {"wall_time_s": time.time() - started, "finished_unix": time.time(), "workers": worker_count()},
    )
    return res


# ---------------------------------------------------------------------- compare
def _probe_names(d: Path, prefix: str) -> set[str]:
    return {p.name[len(prefix) : -len(".csv")] for p in d.glob(f"{prefix}*.csv")}


def compare_dirs(sfv: Path, mc: Path, sigmas: float = 3.0, l1_max: float = 0.05, bins: int = 16) -> dict:
    """Moments and densities of an SFV run against Monte Carlo output.

    Means and variances pass when within ``sigmas`` Monte Carlo standard
    errors; densities when the L1 distance of the two histograms on their
    pooled range (``bins`` bins, no smoothing) is below ``l1_max``.
    """
    names = _probe_names(sfv, "moments_")
    mc_names = _probe_names(mc, "mc_moments_")
    if not names or names != mc_names:
        raise ConfigError(f"probe sets differ: {sorted(names)} vs {sorted(mc_names)}", "compare")
    rows = []
    for name in sorted(names):
        _, a = read_csv(sfv / f"moments_{name}.csv")
        _, b = read_csv(mc / f"mc_moments_{name}.csv")
        tb = {_time_key(t): i for i, t in enumerate(b[:, 0])}
        for ra in a:
            i = tb.get(_time_key(ra[0]))
            if i is None:
                continue
            rb = b[i]
            row = {"probe": name, "time_h": float(ra[0])}
            ok = True
            for k, comp in enumerate(("rho", "q")):
                for j, stat in enumerate(("mean", "var")):
                    col = 1 + 2 * k + j
                    se = rb[5 + 2 * k + j]
                    row[f"se_{stat}_{comp}"] = _finite_or_none(se)
                    if not np.isfinite(rb[col]):
                        # undefined Monte Carlo statistic (a single sample): nothing to test
                        row[f"d_{stat}_{comp}"] = None
                        row[f"pass_{stat}_{comp}"] = True
                        continue
                    diff = abs(ra[col] - rb[col])
                    scale = max(abs(ra[col]), abs(rb[col]), 1.0)
                    limit = sigmas * se if np.isfinite(se) else np.inf
                    passed = bool(diff <= limit + 1e-12 * scale)
                    row[f"d_{stat}_{comp}"] = float(diff)
                    row[f"pass_{stat}_{comp}"] = passed
                    ok &= passed
            atoms = sfv / f"atoms_{name}_{time_tag(ra[0])}.csv"
            samples = mc / f"mc_samples_{name}_{time_tag(ra[0])}.csv"
            if atoms.exists() and samples.exists():
                _, at = read_csv(atoms)
                _, sm = read_csv(samples)
                l1 = common_l1(at[:, 1], at[:, 0], sm[:, 0], None, bins)
                row["l1_rho"] = l1
                row["pass_l1_rho"] = bool(l1 < l1_max)
                ok &= row["pass_l1_rho"]
            row["pass"] = bool(ok)
            rows.append(row)
    if not rows:
        raise ConfigError("no common output times", "compare")
    return {
        "sigmas": sigmas,
        "l1_max": l1_max,
        "bins": bins,
        "rows": rows,
        "pass": all(r["pass"] for r in rows),
    }


def _finite_or_none(v):
    return float(v) if np.isfinite(v) else None


def _g(v) -> str:
    return "n/a" if v is None else f"{v:.3g}"


def summarize(report: dict) -> str:
    lines = []
    for r in report["rows"]:
        if "l1_rho" not in r and r["pass"]:
            continue
        l1 = f" L1={r['l1_rho']:.4f}" if "l1_rho" in r else ""
        lines.append(
            f"{'PASS' if r['pass'] else 'FAIL'} {r['probe']} t={r['time_h']:g}h "
            f"dmean_rho={_g(r['d_mean_rho'])} (se {_g(r['se_mean_rho'])}) "
            f"dvar_rho={_g(r['d_var_rho'])} (se {_g(r['se_var_rho'])}){l1}"
        )
    n_fail = sum(not r["pass"] for r in report["rows"])
    lines.append(f"{len(report['rows'])} probe/time rows, {n_fail} failing: {'PASS' if report['pass'] else 'FAIL'}")
    return "\n".join(lines)


# ---------------------------------------------------------------------- entry point
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sfvnet", description="Stochastic finite volume simulation of gas networks.")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="adaptive SFV run")
    s.add_argument("--config", required=True)
    s.add_argument("--t-end", type=float, help="final time in hours")
    s.add_argument("--tol", type=float, help="adaptivity tolerance")
    s.add_argument("--cfl", type=float)
    s.add_argument("--adapt", choices=("on", "off"))
    s.add_argument("--out", help="output directory (default: [output] dir)")
    s.add_argument("--stochastic-cells", type=int, help="uniform stochastic cells per dimension, no stochastic refinement")

    m = sub.add_parser("mc", help="Monte Carlo reference run")
    m.add_argument("--config", required=True)
    m.add_argument("--samples", type=int, required=True)
    m.add_argument("--seed", type=int, required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--t-end", type=float)

    c = sub.add_parser("compare", help="compare SFV output with Monte Carlo output")
    c.add_argument("--sfv", required=True)
    c.add_argument("--mc", required=True)
    c.add_argument("--report", help="write the machine-readable report (JSON) here")
    c.add_argument("--sigmas", type=float, default=3.0)
    c.add_argument("--l1", type=float, default=0.05)
    c.add_argument("--bins", type=int, default=16)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            doc = apply_overrides(
                _load_doc(args.config), args.t_end, args.tol, args.cfl, args.adapt, args.stochastic_cells
            )
            cfg = parse_run_config(doc)
            out = _prepare_out(args.out or cfg.output.directory)
            sim = run_simulation(cfg, out, args.config)
            print(f"simulated {cfg.t_end_h:g} h in {sim.steps} steps, final DoF {sim.dof}; outputs in {out}")
        elif args.command == "mc":
            if args.samples < 1:
                raise ConfigError("--samples must be >= 1", "command line")
            cfg = parse_run_config(apply_overrides(_load_doc(args.config), t_end=args.t_end))
            out = _prepare_out(args.out)
            res = run_mc(cfg, args.samples, args.seed, out, args.config)
            print(f"{res.n} realisations to {cfg.t_end_h:g} h; outputs in {out}")
        else:
            report = compare_dirs(Path(args.sfv), Path(args.mc), args.sigmas, args.l1, args.bins)
            if args.report:
                Path(args.report).write_text(json.dumps(report, indent=2) + "\n")
            print(summarize(report))
            return EXIT_OK if report["pass"] else EXIT_FAILED
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, StatisticsError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
