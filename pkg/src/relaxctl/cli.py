"""Command-line entry point and experiment runner.

``relaxctl <experiment> --config FILE --out DIR [--threads N] [--seed S]`` runs
one experiment and writes CSV files plus ``manifest.json`` into ``DIR``.
``relaxctl compare A B`` diffs two outputs. Exit codes: 0 success, 2
configuration or schema error, 3 numerical failure, 4 certification miss.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy import integrate

from relaxctl import __version__
from relaxctl import bondmarket as bm
from relaxctl.adjoint import martingale_residuals, solve_adjoints
from relaxctl.config import EXPERIMENTS, RunConfig, load_config
from relaxctl.dynamics import (
    CoefficientModel,
    CostSpec,
    coarsen,
    diagnostics_kolmogorov,
    diagnostics_moments,
    evaluate_cost,
    generate_paths,
    simulate_euler,
    simulate_exact,
)
from relaxctl.errors import (
    ConfigError,
    DimensionError,
    DomainError,
    SchemaMismatchError,
    SimulationDivergedError,
    SolverError,
)
from relaxctl.measures import ActionGrid, FeedbackControl, RelaxedControl
from relaxctl.optimizer import (
    ControlProblem,
    MsaConfig,
    certify,
    msa_optimize,
    near_optimality_probe,
    near_optimality_trend,
    rows_csv,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CERTIFICATION = 0, 2, 3, 4


class CertificationMiss(Exception):
    """A run finished but missed its configured certificate tolerance."""


# ---------------------------------------------------------------------------
# output helpers


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows(path: Path, header, rows) -> None:
    """CSV with ``repr`` floats so values round-trip exactly."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_rows(path: Path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, cfg: RunConfig, files) -> Path:
    manifest = {
        "experiment": cfg.experiment,
        "config_sha256": cfg.sha256,
        "seed": cfg.seed,
        "version": __version__,
        "files": {name: _sha256(out / name) for name in sorted(files)},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# builders


def build_grid(cfg: RunConfig) -> ActionGrid:
    g = cfg.section("grid")
    if "points" in g:
        return ActionGrid(np.asarray(g["points"], dtype=float))
    if {"lo", "hi", "count"} <= set(g):
        return ActionGrid.uniform(float(g["lo"]), float(g["hi"]), int(g["count"]))
    raise ConfigError("[grid] needs 'points' or 'lo', 'hi' and 'count'")


def _coefficient_function(entry: dict, G: int):
    kind = entry.get("kind", "constant")
    if kind == "constant":
        value = np.asarray(entry.get("value", 0.0), dtype=float)
        return lambda t, u: np.broadcast_to(value, (t.shape[0], G))
    if kind == "time-poly":
        coeffs = np.asarray(entry.get("coefficients", [0.0]), dtype=float)

        def poly(t, u):
            tt = t[:, 0]
            if coeffs.ndim == 1:
                vals = np.polynomial.polynomial.polyval(tt, coeffs)[:, None]
                return np.broadcast_to(vals, (tt.size, G))
            return np.stack([np.polynomial.polynomial.polyval(tt, c) for c in coeffs], axis=1)

        return poly
    times = np.asarray(entry.get("times", [0.0]), dtype=float)
    values = np.asarray(entry.get("values", [0.0]), dtype=float)
    if values.shape[0] != times.size or times[0] != 0.0 or np.any(np.diff(times) <= 0):
        raise ConfigError("table coefficients need increasing times from 0 and one row per time")

    def table(t, u):
        idx = np.searchsorted(times, t[:, 0], side="right") - 1
        rows = values[idx]
        return np.broadcast_to(rows if rows.ndim == 2 else rows[:, None], (t.shape[0], G))

    return table


def build_cost(cfg: RunConfig) -> CostSpec:
    c = cfg.section("cost")
    kind = c.get("kind", "mean-variance")
    if kind == "mean-variance":
        return CostSpec.mean_variance(float(c.get("kappa", 0.0)))
    if kind == "quadratic":
        return CostSpec.quadratic_cost(**{k: float(c.get(k, 0.0))
                                          for k in ("h2", "h1", "h0", "g2", "g1", "g0")})
    raise ConfigError("[cost] kind must be 'mean-variance' or 'quadratic'")


def build_market(cfg: RunConfig) -> bm.MarketModel:
    m = dict(cfg.section("market"))
    m.pop("atoms", None)
    curve = m.get("initial_curve", 0.03)
    if isinstance(curve, dict):
        us = np.asarray(curve["maturities"], dtype=float)
        rs = np.asarray(curve["rates"], dtype=float)
        m["initial_curve"] = lambda u, us=us, rs=rs: np.interp(u, us, rs)
    try:
        return bm.MarketModel(**m)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def build_problem(cfg: RunConfig, bundle, curve=None):
    """Coefficients, cost and action grid for the configured model."""
    model_sec = cfg.section("model")
    if model_sec.get("kind") == "bond-market":
        market = build_market(cfg)
        grid = bm.maturity_grid(market, int(cfg.section("market").get("atoms", 3)))
        curve = curve if curve is not None else bm.evolve_curve(market, bundle, keep_surface=False)
        kappa = float(cfg.section("cost").get("kappa", 1.0))
        coeffs, cost = bm.build_control_problem(market, curve, grid, kappa)
        return coeffs, cost, grid
    grid = build_grid(cfg)
    fns = {name: _coefficient_function(model_sec.get(name, {}), grid.count)
           for name in ("upsilon", "phi", "chi", "psi")}
    coeffs = CoefficientModel.from_functions(grid, cfg.time_grid, **fns)
    return coeffs, build_cost(cfg), grid


def build_control(cfg: RunConfig, grid: ActionGrid, base: Path) -> RelaxedControl:
    c = cfg.section("control")
    kind = c.get("kind", "uniform")
    tg = cfg.time_grid
    if kind == "uniform":
        return RelaxedControl.constant(grid, tg, np.full(grid.count, 1.0 / grid.count))
    if kind == "dirac":
        return RelaxedControl.dirac(grid, tg, int(c.get("index", 0)))
    if kind == "constant":
        return RelaxedControl.constant(grid, tg, c["weights"])
    if kind == "csv":
        return RelaxedControl.from_csv(base / c["path"], grid)
    raise ConfigError("[control] kind must be uniform, dirac, constant or csv")


def _bundle(cfg: RunConfig, threads: int, steps=None):
    tg = np.linspace(0.0, cfg.horizon, (steps or cfg.steps) + 1)
    return generate_paths(cfg.seed, cfg.scenarios, tg, 1, cfg.x0, threads, cfg.antithetic)


# ---------------------------------------------------------------------------
# experiments


def _simulate(cfg, out, threads, base):
    bundle = _bundle(cfg, threads)
    coeffs, cost, grid = build_problem(cfg, bundle)
    control = build_control(cfg, grid, base)
    run = simulate_exact if cfg.scheme == "exact" else simulate_euler
    states = run(coeffs, control, bundle, threads)
    n = min(cfg.scenarios, int(cfg.section("simulate").get("export_scenarios", 100)))
    write_rows(out / "states.csv", ["scenario", "t", "x"],
               ((s, t, states.x[s, j]) for s in range(n) for j, t in enumerate(states.time_grid)))
    J, se = evaluate_cost(cost, control, states)
    rows = [("sup_moment_p%g" % p, diagnostics_moments(states, p)) for p in
            cfg.section("simulate").get("moments", [2, 4])]
    rows.append(("kolmogorov", diagnostics_kolmogorov(states)))
    rows.append(("cost", J))
    rows.append(("cost_stderr", se))
    exp_m = coeffs.exponential_moments()
    rows.append(("exp_moments_finite", float(np.all(np.isfinite(exp_m)))))
    write_rows(out / "diagnostics.csv", ["quantity", "value"], rows)
    return ["states.csv", "diagnostics.csv"]


def _adjoint(cfg, out, threads, base):
    bundle = _bundle(cfg, threads)
    coeffs, cost, grid = build_problem(cfg, bundle)
    control = build_control(cfg, grid, base)
    states = simulate_exact(coeffs, control, bundle, threads)
    sec = cfg.section("adjoint")
    sol = solve_adjoints(coeffs, control, states, cost, sec.get("backend", "auto"))
    n = min(cfg.scenarios, int(sec.get("export_scenarios", 100)))
    header = ["scenario", "t", "p", "q_0", "P", "Q_0"]
    write_rows(out / "adjoint.csv", header,
               ((s, t, sol.p[s, j], sol.q[s, j, 0], sol.P[s, j], sol.Q[s, j, 0])
                for s in range(n) for j, t in enumerate(states.time_grid)))
    mean, se = martingale_residuals(coeffs, control, states, cost, sol)
    write_rows(out / "martingale.csv", ["t", "residual_mean", "residual_stderr"],
               zip(states.time_grid[:-1], mean, se))
    return ["adjoint.csv", "martingale.csv"]


def _problem_for(cfg, threads, mode="squared", backend="auto"):
    bundle = _bundle(cfg, threads)
    coeffs, cost, grid = build_problem(cfg, bundle)
    return ControlProblem(coeffs, cost, bundle, cfg.scheme, backend, mode, threads), grid


def _optimize(cfg, out, threads, base):
    sec = cfg.section("optimize")
    problem, grid = _problem_for(cfg, threads, sec.get("mode", "squared"),
                                 sec.get("backend", "auto"))
    control = problem.on_grid(build_control(cfg, grid, base))
    if sec.get("control_class", "time") == "feedback":
        control = FeedbackControl.from_states(control, problem.simulate(control).x,
                                              int(sec.get("bins", 8)))
    config = MsaConfig(**{k: sec[k] for k in ("max_iterations", "beta", "backtrack", "min_beta",
                                             "tolerance", "relative") if k in sec},
                       seed=cfg.seed)
    final, cert = msa_optimize(problem, control, config)
    cert.trace_csv(out / "iterations.csv")
    cert.detail_csv(out / "certificate.csv")
    files = ["iterations.csv", "certificate.csv"]
    if isinstance(final, RelaxedControl):
        final.to_csv(out / "control.csv")
        files.append("control.csv")
    _summary(out, cert)
    files.append("summary.csv")
    return files, (None if cert.converged else f"MSA stopped with status {cert.status}")


def _summary(out, cert):
    write_rows(out / "summary.csv", ["quantity", "value"], [
        ("J", cert.J), ("J_stderr", cert.J_se), ("integrated_gap", cert.integrated),
        ("integrated_gap_stderr", cert.integrated_se), ("max_pointwise_gap", cert.max_pointwise),
        ("min_pointwise_gap", cert.min_pointwise), ("adapted_gap", cert.adapted_integrated),
        ("adapted_gap_stderr", cert.adapted_integrated_se), ("vertex_gap", cert.vertex_gap),
        ("status", cert.status)])


def _certify(cfg, out, threads, base):
    sec = cfg.section("certify")
    problem, grid = _problem_for(cfg, threads, sec.get("mode", "squared"),
                                 sec.get("backend", "auto"))
    cert = certify(problem, build_control(cfg, grid, base))
    cert.detail_csv(out / "certificate.csv")
    _summary(out, cert)
    tol = float(sec.get("tolerance", 1e-3))
    bound = tol * (abs(cert.J) if sec.get("relative", True) else 1.0)
    miss = None if cert.integrated <= bound else (
        f"integrated gap {cert.integrated!r} exceeds tolerance {bound!r}")
    return ["certificate.csv", "summary.csv"], miss


def _chatter(cfg, out, threads, base):
    sec = cfg.section("chatter")
    problem, grid = _problem_for(cfg, threads, backend=sec.get("backend", "auto"))
    relaxed = build_control(cfg, grid, base)
    rows = near_optimality_probe(problem, relaxed, sec.get("ks", list(range(2, 9))))
    rows_csv(rows, out / "chatter.csv")
    trend = near_optimality_trend(rows)
    write_rows(out / "trend.csv", ["quantity", "value"], sorted(trend.items()))
    return ["chatter.csv", "trend.csv"]


def _bond(cfg, out, threads, base):
    market = build_market(cfg)
    sec = cfg.section("bond")
    mats = [float(m) for m in sec.get("maturities", [cfg.horizon + 1.0, cfg.horizon + 2.0])]
    refinements = int(sec.get("refinements", 4))
    fine = cfg.steps * 2 ** (refinements - 1)
    bundle = _bundle(cfg, threads, fine)
    files = []
    rows = []
    for level in range(refinements):
        factor = 2 ** (refinements - 1 - level)
        b = coarsen(bundle, factor) if factor > 1 else bundle
        curve = bm.evolve_curve(market, b, track=mats, keep_surface=False)
        control, grid, target = bm.passive_portfolio(market, curve, mats)
        coeffs, _ = bm.build_control_problem(market, curve, grid, 1.0)
        states = simulate_exact(coeffs, control, b.with_x0(float(target[0, 0])), threads)
        err = np.max(np.abs(states.x - target) / target)
        rows.append((b.steps, float(b.dt[0]), err))
    write_rows(out / "replication.csv", ["steps", "dt", "max_rel_error"], rows)
    files.append("replication.csv")

    b = _bundle(cfg, threads)
    curve = bm.evolve_curve(market, b, track=mats[:1], keep_surface=True)
    disc = curve.tracked[mats[0]] / curve.bank
    mean = disc.mean(axis=0)
    se = disc.std(axis=0, ddof=1) / np.sqrt(disc.shape[0])
    write_rows(out / "martingale.csv", ["t", "discounted_price_mean", "stderr", "z_score"],
               ((t, m, s, (m - mean[0]) / s if s > 0 else 0.0)
                for t, m, s in zip(curve.time_grid, mean, se)))
    files.append("martingale.csv")
    p0 = max(float(np.max(np.abs(bm.bond_price(curve, j, 0.0) - 1.0)))
             for j in range(curve.time_grid.size))
    summary = [("max_abs_p0_minus_1", p0)]
    if market.kind == "hull-white":
        quad, _ = integrate.quad(lambda x: market.sigma * np.exp(-market.c * x), 0.0,
                                 market.T_star, epsabs=1e-14, epsrel=1e-14)
        summary.append(("v_T_star", float(bm.integrated_vol(market, 0.0, market.T_star))))
        summary.append(("v_T_star_quadrature", -quad))
    write_rows(out / "summary.csv", ["quantity", "value"], summary)
    files.append("summary.csv")
    return files


def _convergence(cfg, out, threads, base):
    levels = [int(v) for v in cfg.section("convergence").get("levels", [16, 32, 64, 128, 256, 512])]
    if any(b % a for a, b in zip(levels, levels[1:])):
        raise ConfigError("convergence levels must divide each other")
    bundle = _bundle(cfg, threads, levels[-1])
    rows = []
    for m in levels:
        b = coarsen(bundle, levels[-1] // m) if m != levels[-1] else bundle
        cfg_m = replace(cfg, steps=m)
        coeffs, _, grid = build_problem(cfg_m, b)
        control = build_control(cfg_m, grid, base)
        ex = simulate_exact(coeffs, control, b, threads)
        eu = simulate_euler(coeffs, control, b, threads)
        rms = float(np.sqrt(np.mean((ex.x[:, -1] - eu.x[:, -1]) ** 2)))
        rows.append((m, cfg.horizon / m, rms))
    slope = float(np.polyfit(np.log([r[1] for r in rows]), np.log([r[2] for r in rows]), 1)[0])
    write_rows(out / "convergence.csv", ["steps", "dt", "rms_terminal_gap"], rows)
    write_rows(out / "summary.csv", ["quantity", "value"], [("slope", slope)])
    return ["convergence.csv", "summary.csv"]


_RUNNERS = {
    "simulate": _simulate, "adjoint": _adjoint, "optimize": _optimize, "certify": _certify,
    "chatter-sweep": _chatter, "bond-demo": _bond, "convergence": _convergence,
}


def run(config_path, out_dir, threads=None, seed=None, experiment=None):
    """Run the configured experiment; returns (exit code, message)."""
    try:
        cfg = load_config(config_path)
        if experiment is not None and experiment != cfg.experiment:
            raise ConfigError(f"config describes {cfg.experiment!r}, not {experiment!r}")
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        n_threads = int(threads) if threads is not None else cfg.threads
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result = _RUNNERS[cfg.experiment](cfg, out, n_threads, Path(config_path).parent)
        files, miss = result if isinstance(result, tuple) else (result, None)
        write_manifest(out, cfg, files)
    except (ConfigError, SchemaMismatchError, DimensionError, DomainError, KeyError) as exc:
        return EXIT_CONFIG, f"config error: {exc}"
    except SimulationDivergedError as exc:
        return EXIT_NUMERIC, f"numeric failure in dynamics (step {exc.step}): {exc}"
    except SolverError as exc:
        return EXIT_NUMERIC, f"numeric failure in adjoint (step {exc.step}): {exc}"
    except FloatingPointError as exc:
        return EXIT_NUMERIC, f"numeric failure: {exc}"
    if miss:
        return EXIT_CERTIFICATION, miss
    return EXIT_OK, "ok"


# ---------------------------------------------------------------------------
# compare


def _numeric(v: str):
    try:
        return float(v)
    except ValueError:
        return None


def compare_files(a: Path, b: Path):
    """Per-column maximum absolute and relative differences of two CSV files."""
    ha, ra = read_rows(a)
    hb, rb = read_rows(b)
    if ha != hb or len(ra) != len(rb):
        raise SchemaMismatchError(f"{a.name}: headers or row counts differ")
    out = []
    for k, col in enumerate(ha):
        max_abs = max_rel = 0.0
        for x, y in zip(ra, rb):
            fx, fy = _numeric(x[k]), _numeric(y[k])
            if fx is None or fy is None:
                d = 0.0 if x[k] == y[k] else float("inf")
                rel = d
            else:
                d = abs(fx - fy)
                scale = max(abs(fx), abs(fy))
                rel = d / scale if scale > 0 else 0.0
            max_abs, max_rel = max(max_abs, d), max(max_rel, rel)
        out.append((a.name, col, max_abs, max_rel))
    return out


def compare(a, b):
    """Diff two run directories (or two CSV files)."""
    a, b = Path(a), Path(b)
    if a.is_file() and b.is_file():
        return compare_files(a, b)
    names_a = sorted(p.name for p in a.glob("*.csv"))
    names_b = sorted(p.name for p in b.glob("*.csv"))
    if names_a != names_b:
        raise SchemaMismatchError("runs contain different CSV files")
    rows = []
    for name in names_a:
        rows += compare_files(a / name, b / name)
    return rows


# ---------------------------------------------------------------------------
# argument parsing


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="relaxctl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run a {name} experiment")
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--threads", type=int)
        p.add_argument("--seed", type=int)
    p = sub.add_parser("compare", help="diff two run outputs")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--out", help="write the report to this CSV file")
    args = parser.parse_args(argv)

    if args.command == "compare":
        try:
            rows = compare(args.a, args.b)
        except (SchemaMismatchError, OSError) as exc:
            print(f"schema mismatch: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        header = ["file", "column", "max_abs", "max_rel"]
        if args.out:
            write_rows(Path(args.out), header, rows)
        else:
            w = csv.writer(sys.stdout, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
        return EXIT_OK

    code, message = run(args.config, args.out, args.threads, args.seed, args.command)
    if code != EXIT_OK:
        print(message, file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
