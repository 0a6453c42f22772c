"""Command-line front end: parse a configuration, run one experiment, write CSVs and a manifest."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, parse_config
from .control import HJBGrid, evaluate_policy_cost, simulate_benes, solve_hjb_sufficient_stats
from .dynamics import mean_field_drift, simulate_population, stream
from .errors import ConfigError, PomfgError
from .filtering import (DensityGrid, GridFilterBank, ParticleCloud, benes_filter_step, benes_marginal_x1,
                        initial_stats, kalman_bucy_oracle, particle_filter_step, phi_residual_check,
                        write_density_csv, write_stats_csv)
from .measure_flow import (MeasureFlow, PathEnsemble, empirical_measure, marginal_distance, path_distance_DT,
                           wasserstein1, write_flow_csv)
from .mfg_fixed_point import estimate_gain_constants, nce_iterate, probe_states
from .nash_audit import mv_rate_study, nash_rate_study
from .presets import mean_reversion_flow, open_loop_drive

log = logging.getLogger(__name__)

MANIFEST = "manifest.txt"
COMMANDS = ("filter-demo", "benes-demo", "solve-mfg", "mv-rate", "nash-audit", "distances")


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    version: str
    wall_time: float
    files: list

    def write(self, path) -> None:
        """Flat ``key = value`` text; only wall_time varies between identical runs."""
        with open(path, "w") as fh:
            fh.write(f"config_hash = {self.config_hash}\n")
            fh.write(f"seed = {self.seed}\n")
            fh.write(f"version = {self.version}\n")
            fh.write(f"wall_time = {self.wall_time:.3f}\n")
            fh.write(f"files = {','.join(self.files)}\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        kv = dict(line.split(" = ", 1) for line in Path(path).read_text().splitlines() if " = " in line)
        files = [f for f in kv.get("files", "").split(",") if f]
        return cls(kv["config_hash"], int(kv["seed"]), kv["version"], float(kv["wall_time"]), files)


def _write_rows(path, header, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else f"{v:.17g}" for v in row) + "\n")


def _need(cfg: RunConfig, benes: bool, command: str) -> None:
    if cfg.is_benes != benes:
        kind = "benes-quadratic" if benes else "a scalar preset (driftless, linear-gaussian, mean-reversion-coupled)"
        raise ConfigError(f"{command} needs {kind}, got preset {cfg.preset!r}")


def _initial_flow(model) -> MeasureFlow:
    return MeasureFlow.constant(model.times, empirical_measure([0.0]))


# subcommands -----------------------------------------------------------------------------

def filter_demo(cfg: RunConfig, out: Path) -> list:
    """One agent against the point mass at the origin, filtered on the grid or by particles."""
    _need(cfg, False, "filter-demo")
    sc, dt, n = cfg.model, cfg.model.dt, cfg.model.n_steps
    if cfg.filter_kind == "none":
        raise ConfigError("filter-demo needs filter kind grid or particle")
    z = np.empty(n + 1)
    z[0] = sc.means_for(1)[0] + np.sqrt(sc.init_var) * stream(cfg.seed, 0, "init").standard_normal()
    dw = stream(cfg.seed, 0, "state").standard_normal(n) * np.sqrt(dt)
    dv = stream(cfg.seed, 0, "obs").standard_normal(n) * np.sqrt(dt)
    dy = np.empty(n)
    for k in range(n):
        t = k * dt
        dy[k] = sc.h(z[k]) * dt + dv[k]
        z[k + 1] = z[k] + mean_field_drift(sc.f_dagger, t, z[k], None) * dt + sc.sigma * dw[k]

    grid = sc.grid
    means, variances, files = np.empty(n + 1), np.empty(n + 1), []
    snaps = set(np.linspace(0, n, cfg.snapshots).round().astype(int)) if cfg.snapshots else set()
    if cfg.filter_kind == "grid":
        bank = GridFilterBank(grid.nodes, sc.means_for(1), sc.init_var, sc.sigma, dt, grid.k)
    else:
        rng = stream(cfg.seed, 0, "filter")
        cloud = ParticleCloud(sc.means_for(1)[0] + np.sqrt(sc.init_var) * rng.standard_normal(cfg.particles),
                              np.zeros(cfg.particles))
    for k in range(n + 1):
        t = k * dt
        if cfg.filter_kind == "grid":
            means[k], variances[k] = bank.mean[0], bank.variance[0]
            if k in snaps:
                name = f"density_{k:06d}.csv"
                write_density_csv(DensityGrid(bank.x, bank.values[0].copy(), grid.k, t), out / name)
                files.append(name)
        else:
            means[k], variances[k] = cloud.mean, cloud.variance
        if k == n:
            break
        if cfg.filter_kind == "grid":
            fstar = mean_field_drift(sc.f_dagger, t, bank.x, None)
            bank.step(np.zeros(1), dy[k:k + 1], dt, fstar, sc.h)
        else:
            cloud = particle_filter_step(cloud, 0.0, dy[k], dt, sc, None, rng)

    header = ["t", "z", "filter_mean", "filter_var"]
    cols = [sc.times, z, means, variances]
    if cfg.preset in ("linear-gaussian", "driftless"):
        a = float(mean_field_drift(sc.f_dagger, 0.0, 1.0, None))
        c = float(sc.h(1.0))
        m, v = kalman_bucy_oracle(a, c, sc.sigma, 1.0, dy, float(sc.means_for(1)[0]), sc.init_var, dt)
        header += ["kb_mean", "kb_var"]
        cols += [m, v]
    _write_rows(out / "filter.csv", header, zip(*cols))
    return ["filter.csv", *files]


def benes_demo(cfg: RunConfig, out: Path) -> list:
    """Residual check, one filtered path, the value function and policy against the initial flow."""
    _need(cfg, True, "benes-demo")
    model, M = cfg.model, cfg.experiment["m"]
    x1 = np.linspace(model.xi[0] - 6, model.xi[0] + 6, 241)
    res = phi_residual_check(model, x1, model.times[1:-1])
    _write_rows(out / "residual.csv", ["max_residual", "tolerance", "passed"],
                [(res.max_residual, res.tolerance, str(res.passed).lower())])

    flow = _initial_flow(model)
    V, policy = solve_hjb_sufficient_stats(model, flow, HJBGrid.around(model), cfg.mode)
    V.write_csv(out / "value.csv")
    policy.write_csv(out / "policy.csv")

    path = simulate_benes(model, policy, 1, cfg.seed, cfg.mode)
    s = initial_stats(model)
    history = [s]
    for k in range(model.n_steps):
        dy = path.observations[0, k + 1] - path.observations[0, k]
        s = benes_filter_step(s, path.controls[0, k], dy, model.dt, model, cfg.mode)
        history.append(s)
    write_stats_csv(history, out / "stats.csv")
    _write_rows(out / "density_T.csv", ["x1", "density"], zip(x1, benes_marginal_x1(history[-1], model, x1)))

    est = evaluate_policy_cost(model, policy, flow, M, seed=cfg.seed, mode=cfg.mode)
    v0 = float(V.at(0.0, [model.xi])[0])
    _write_rows(out / "cost.csv", ["value_at_start", "mc_cost", "mc_stderr", "paths"], [(v0, est.mean, est.stderr, est.n)])
    return ["residual.csv", "value.csv", "policy.csv", "stats.csv", "density_T.csv", "cost.csv"]


def _solve(cfg: RunConfig):
    e = cfg.experiment
    return nce_iterate(_initial_flow(cfg.model), cfg.model, e["tol"], e["max_iter"], e["m"], cfg.seed,
                       mode=cfg.mode, damping=e["damping"])


def solve_mfg(cfg: RunConfig, out: Path) -> list:
    _need(cfg, True, "solve-mfg")
    report = _solve(cfg)
    if cfg.experiment["gain_constants"]:
        base = report.iterates[-1]
        probes = probe_states(cfg.model, report.policy, 200, 200, cfg.seed, cfg.mode)
        report.gain_estimate = estimate_gain_constants(
            cfg.model, base, [base.shifted(0.25), base.shifted(-0.25), base.shifted(0.5)], probes,
            M=cfg.experiment["m"], seed=cfg.seed, mode=cfg.mode)
    report.write_csv(out / "fixed_point.csv")
    report.policy.write_csv(out / "policy.csv")
    write_flow_csv(report.iterates[-1], out / "flow.csv")
    d_t = "" if report.path_distance is None else report.path_distance
    _write_rows(out / "summary.csv", ["iterations", "converged", "final_distance", "path_distance"],
                [(str(report.iterations), str(report.converged).lower(), report.distances[-1], d_t)])
    return ["fixed_point.csv", "policy.csv", "flow.csv", "summary.csv"]


def mv_rate(cfg: RunConfig, out: Path) -> list:
    """Open-loop drive shared by every agent, so the limit flow is known exactly when coupled."""
    _need(cfg, False, "mv-rate")
    sc, e = cfg.model, cfg.experiment
    if cfg.preset == "mean-reversion-coupled":
        gamma = float(sc.f_dagger(0.0, 0.0, 1.0))
        flow = mean_reversion_flow(gamma, sc.sigma, float(sc.means_for(1)[0]), sc.init_var, sc.times, e["amplitude"])
    else:
        flow = _initial_flow(sc)
    kind = "none" if cfg.filter_kind == "none" else cfg.filter_kind
    report = mv_rate_study(sc, open_loop_drive(e["amplitude"]), list(e["n_values"]), e["replications"], cfg.seed,
                           flow, filter_mode=kind)
    report.write_csv(out / "mv_rate.csv")
    _write_rows(out / "mv_rate_fit.csv", ["slope", "intercept", "spearman", "message"],
                [(report.slope, report.intercept, report.spearman, report.message)])
    return ["mv_rate.csv", "mv_rate_fit.csv"]


def nash_audit(cfg: RunConfig, out: Path) -> list:
    _need(cfg, True, "nash-audit")
    e = cfg.experiment
    fixed = _solve(cfg)
    report = nash_rate_study(cfg.model, fixed.policy, fixed.iterates[-1], list(e["n_values"]), cfg.seed,
                             deviation_budget=e["deviation_budget"], replications=e["nash_replications"],
                             mode=cfg.mode)
    report.write_csv(out / "nash.csv")
    _write_rows(out / "nash_detail.csv",
                ["N", "baseline_cost", "best_deviation_cost", "gap", "stderr", "detected", "best_deviation"],
                [(str(r.N), r.baseline_cost, r.best_deviation_cost, r.gap, r.stderr, str(r.detected).lower(),
                  r.best_deviation) for r in report.reports])
    _write_rows(out / "nash_fit.csv", ["slope", "C", "passed", "message"],
                [(report.slope, report.C, str(report.passed).lower(), report.message)])
    return ["nash.csv", "nash_detail.csv", "nash_fit.csv"]


def _sample_paths(cfg: RunConfig, M: int, rep: int) -> np.ndarray:
    if cfg.is_benes:
        return simulate_benes(cfg.model, lambda t, r: np.zeros(len(r)), M, cfg.seed, cfg.mode, rep=rep).states[:, :, 1]
    return simulate_population(cfg.model, open_loop_drive(cfg.experiment["amplitude"]), M, "none", rep=rep).states


def distances(cfg: RunConfig, out: Path) -> list:
    """Distances between two independent ensembles of the configured model."""
    M = min(cfg.experiment["m"], 256)
    a, b = _sample_paths(cfg, M, 0), _sample_paths(cfg, M, 1)
    times = cfg.model.times
    rows = []
    for k, t in enumerate(times):
        ma, mb = empirical_measure(a[:, k]), empirical_measure(b[:, k])
        rows.append((t, wasserstein1(ma, mb), marginal_distance(ma, mb)))
    _write_rows(out / "marginal_distances.csv", ["t", "w1", "marginal_distance"], rows)
    d_t = path_distance_DT(PathEnsemble(times, a), PathEnsemble(times, b))
    _write_rows(out / "path_distance.csv", ["paths", "sup_marginal", "path_distance_DT"],
                [(str(M), max(r[2] for r in rows), d_t)])
    return ["marginal_distances.csv", "path_distance.csv"]


RUNNERS = {"filter-demo": filter_demo, "benes-demo": benes_demo, "solve-mfg": solve_mfg, "mv-rate": mv_rate,
           "nash-audit": nash_audit, "distances": distances}


def run(subcommand: str, cfg: RunConfig, out_dir) -> RunManifest:
    if subcommand not in RUNNERS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    files = RUNNERS[subcommand](cfg, out)
    (out / "config.ini").write_text(cfg.to_ini())
    files = [*files, "config.ini"]
    manifest = RunManifest(cfg.hash, cfg.seed, __version__, time.perf_counter() - start, [*files, MANIFEST])
    manifest.write(out / MANIFEST)
    return manifest


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pomfg", description="Partially observed mean field game experiments.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", metavar="PATH", help="sectioned key-value configuration file")
    ap.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
    ap.add_argument("--seed", type=int, help="overrides [run] seed")
    ap.add_argument("--threads", type=int, help="accepted for compatibility; results never depend on it")
    ap.add_argument("--preset", metavar="NAME", help="overrides [run] preset")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config, preset=args.preset)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be at least 1")
            cfg.threads = args.threads
        manifest = run(args.command, cfg, args.out)
    except PomfgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(f"wrote {len(manifest.files)} files to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
