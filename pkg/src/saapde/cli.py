"""Command-line front end.

Subcommands: ``constants``, ``gradcheck``, ``solve``, ``sweep-mc``,
``sweep-quad``, ``report``.  Configuration comes from a JSON file (strict
schema, unknown keys rejected) with flag overrides; every emitted artifact
carries the configuration hash in its name and content.

Sweep tables are written as RFC-4180 CSV with 17 significant digits and a
fixed column set; repeated runs with the same configuration produce
byte-identical CSV files.  The ``wall_ms`` column is a deterministic work
proxy (scenario band-solve units at a nominal microsecond each), not wall
clock, precisely so that this holds; real timings go to the JSON summary.
Exit codes: 0 success, 1 validation error, 2 numerical failure, 3
acceptance-test failure (gradient battery above threshold).
"""

from __future__ import annotations

import argparse
import csv
import datetime
import io
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import PROBLEM_KINDS, RunConfig, build_bilinear, build_grid, build_semilinear
from .errors import ConfigError, SaaPdeError
from .experiments import (
    SweepRecord,
    default_start,
    gradcheck,
    run_mc_sweep,
    run_quadrature_sweep,
    trend_stats,
)
from .grid import estimate_constants, norms
from .optimizer import SolverConfig, solve
from .random_field import monte_carlo, quadrature

CSV_COLUMNS = (
    "problem",
    "N",
    "seed",
    "objective",
    "residual",
    "t_value",
    "dist_to_ref",
    "ref_residual",
    "wall_ms",
)


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def records_to_csv(records: list[SweepRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def compute_constants(cfg: RunConfig) -> dict:
    """All certified problem constants for the configured grid and fields."""
    grid = build_grid(cfg)
    consts = estimate_constants(grid)
    fs = cfg.field
    c_d = consts.C_D
    b_max = fs.b_max(grid)
    kappa_min = fs.kappa_min
    r_ad = max(abs(cfg.semilinear.box_lower), abs(cfg.semilinear.box_upper))
    yd_l2 = norms(build_semilinear(cfg, grid)[0].y_d)[0]
    c_s = (c_d / kappa_min) * (r_ad + 1.0) + c_d * b_max / kappa_min
    c_z = (c_d ** 2 / kappa_min) * c_s + (c_d / kappa_min) * yd_l2
    t_bound = c_d ** 2 * c_s ** 2 + yd_l2 ** 2
    delta = kappa_min / (2.0 * fs.g_max * consts.C_H01_L4 ** 2)
    return {
        "C_D": c_d,
        "C_H01_L4": consts.C_H01_L4,
        "delta": delta,
        "kappa_min": kappa_min,
        "kappa_max": fs.kappa_max,
        "g_max": fs.g_max,
        "b_max": b_max,
        "c_S": c_s,
        "c_z": c_z,
        "t_bound": t_bound,
        "r_ad": r_ad,
    }


def load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        with open(args.config) as fh:
            cfg = RunConfig.from_dict(json.load(fh))
    else:
        cfg = RunConfig()
    if getattr(args, "n", None):
        cfg = cfg.with_overrides(n=args.n)
    threads = getattr(args, "threads", None)
    if threads is None:
        env = os.environ.get("SAA_PDE_THREADS")
        threads = int(env) if env else None
    if threads is not None:
        cfg = cfg.with_overrides(threads=max(1, threads))
    return cfg


def _summary(cfg: RunConfig, kind: str, result, constants: dict, quad: bool) -> dict:
    stats = trend_stats(result.records)
    per_n = {
        str(N): {"median_dist": m, "q25": a, "q75": b}
        for N, m, a, b in zip(stats.sizes, stats.medians, stats.q25, stats.q75)
    }
    return {
        "config_hash": cfg.config_hash(),
        "constants": constants,
        "per_N": per_n,
        "slope_loglog": stats.slope_loglog,
        "problem": kind,
        "sweep_kind": "quadrature" if quad else "monte_carlo",
        "config": cfg.to_dict(),
        "code_version": __version__,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "elapsed_s": result.elapsed_s,
        "reference": {
            "count": len(result.reference),
            "objectives": [p.objective for p in result.reference],
            "residuals": [p.residual for p in result.reference],
        },
        "failures": [
            {"N": r.N, "seed": r.seed, "residual": r.residual}
            for r in result.records
            if not r.converged
        ],
    }


def _emit_sweep(cfg: RunConfig, kind: str, result, out_dir: Path, quad: bool) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    tag = "quad" if quad else "mc"
    h = cfg.config_hash()
    csv_path = out_dir / f"sweep_{tag}_{kind}_{h}.csv"
    csv_path.write_text(records_to_csv(result.records))
    summary = _summary(cfg, kind, result, compute_constants(cfg), quad)
    summary["records_file"] = csv_path.name
    json_path = out_dir / f"summary_{tag}_{kind}_{h}.json"
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"wrote {csv_path}")
    print(f"wrote {json_path}")
    return json_path


# -- subcommands ---------------------------------------------------------------


def cmd_constants(args) -> int:
    cfg = load_config(args)
    values = compute_constants(cfg)
    for key, val in values.items():
        print(f"{key} = {val:.6g}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = load_config(args)
    report = gradcheck(cfg)
    print(f"max relative error, semilinear adjoint gradient: {report.max_rel_semilinear:.3e}")
    print(f"max relative error, bilinear adjoint gradient:   {report.max_rel_bilinear:.3e}")
    print(f"max relative error, risk subgradient slots:      {report.max_rel_avar:.3e}")
    print(f"threshold: {report.threshold:.1e}  elapsed: {report.elapsed_s:.1f}s")
    if report.passed:
        print("gradcheck PASS")
        return 0
    print("gradcheck FAIL")
    return 3


def cmd_solve(args) -> int:
    cfg = load_config(args)
    kind = args.problem
    grid = build_grid(cfg)
    if kind == "semilinear-avar":
        problem, reg = build_semilinear(cfg, grid)
    else:
        problem, reg = build_bilinear(cfg, grid)
    if args.level_quad is not None:
        scen = quadrature(cfg.field, args.level_quad)
        if args.N is not None and args.N != len(scen):
            raise ConfigError(
                f"--N {args.N} contradicts --level-quad {args.level_quad} "
                f"({len(scen)} scenarios)"
            )
        seed_label = args.level_quad
    else:
        N = args.N if args.N is not None else 64
        scen = monte_carlo(cfg.field, args.seed, N)
        seed_label = args.seed
    eps = args.eps if args.eps is not None else cfg.sweep.eps_for(len(scen))
    solver = SolverConfig(
        gamma=cfg.solver.gamma,
        step_mode=cfg.solver.step_mode,
        max_iters=cfg.solver.max_iters,
        eps_stat=eps,
        t_update=cfg.solver.t_update,
        gamma_probe=cfg.solver.gamma_probe,
    )
    point = solve(problem, scen, reg, solver, u0=default_start(kind, grid, cfg))
    record = SweepRecord(
        problem=kind,
        N=len(scen),
        seed=seed_label,
        objective=point.objective,
        residual=point.residual,
        t_value=point.t if point.t is not None else float("nan"),
        dist_to_ref=float("nan"),
        ref_residual=float("nan"),
        wall_ms=point.work_units * 1e-3,
        iterations=point.iterations,
        converged=point.converged,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"solve_{kind}_{cfg.config_hash()}.csv"
    path.write_text(records_to_csv([record]))
    print(f"objective = {point.objective:.10e}")
    print(f"residual  = {point.residual:.3e}  (eps = {eps:.3e})")
    if point.t is not None:
        print(f"t         = {point.t:.10e}")
    print(f"iterations = {point.iterations}  converged = {point.converged}")
    print(f"wrote {path}")
    return 0 if point.converged else 2


def cmd_sweep(args, quad: bool) -> int:
    cfg = load_config(args)
    kinds = PROBLEM_KINDS if args.problem == "both" else (args.problem,)
    rc = 0
    for kind in kinds:
        runner = run_quadrature_sweep if quad else run_mc_sweep
        result = runner(cfg, kind)
        _emit_sweep(cfg, kind, result, Path(args.out), quad)
        bad = [r for r in result.records if not r.converged]
        if bad:
            print(f"{len(bad)} cell(s) did not converge", file=sys.stderr)
            rc = 2
    return rc


def cmd_report(args) -> int:
    from .experiments import TrendStats
    from .report import consistency_figure, residual_figure

    summary_path = Path(args.bundle)
    with open(summary_path) as fh:
        summary = json.load(fh)
    cfg = RunConfig.from_dict(summary["config"])
    recomputed = cfg.config_hash()
    claimed = summary.get("config_hash")
    if recomputed != claimed:
        print(
            f"bundle hash mismatch: summary says {claimed}, "
            f"config rehashes to {recomputed}",
            file=sys.stderr,
        )
        return 1
    if claimed not in summary_path.name:
        print("bundle file name does not carry its config hash", file=sys.stderr)
        return 1
    records_file = summary_path.parent / summary["records_file"]
    with open(records_file, newline="") as fh:
        rows = list(csv.DictReader(fh))
    records = [
        {
            "N": int(r["N"]),
            "seed": int(r["seed"]),
            "dist_to_ref": float(r["dist_to_ref"]),
            "residual": float(r["residual"]),
            "ref_residual": float(r["ref_residual"]),
        }
        for r in rows
    ]

    sizes = sorted({r["N"] for r in records})
    med, q25, q75 = [], [], []
    for N in sizes:
        d = np.array([r["dist_to_ref"] for r in records if r["N"] == N])
        med.append(float(np.median(d)))
        q25.append(float(np.quantile(d, 0.25)))
        q75.append(float(np.quantile(d, 0.75)))
    logs = [(np.log(N), np.log(m)) for N, m in zip(sizes, med) if m > 0]
    slope = (
        float(np.polyfit(*np.array(logs).T, 1)[0]) if len(logs) >= 2 else float("nan")
    )
    stats = TrendStats(
        sizes=tuple(sizes),
        medians=tuple(med),
        q25=tuple(q25),
        q75=tuple(q75),
        se_medians=tuple(0.0 for _ in sizes),
        slope_loglog=slope,
    )

    out_dir = Path(args.out) if args.out else summary_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    kind = summary["problem"]
    quad = summary.get("sweep_kind") == "quadrature"
    stem = f"report_{summary['sweep_kind']}_{kind}_{claimed}"

    table_path = out_dir / f"{stem}_per_N.csv"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["N", "median_dist", "q25", "q75", "slope_loglog"])
    for N, m, a, b in zip(sizes, med, q25, q75):
        writer.writerow([N, _fmt(m), _fmt(a), _fmt(b), _fmt(slope)])
    table_path.write_text(buf.getvalue())

    fig1 = consistency_figure(stats, kind, out_dir / f"{stem}_trend.png", quad=quad)
    fig2 = residual_figure(records, kind, out_dir / f"{stem}_residuals.png")
    print(f"wrote {table_path}")
    print(f"wrote {fig1}")
    print(f"wrote {fig2}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="saa-pde",
        description=(
            "Sample-based approximation of risk-averse semilinear and "
            "risk-neutral bilinear control problems on the unit square"
        ),
    )
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--threads", type=int, help="worker cap (env SAA_PDE_THREADS)")
    parser.add_argument("--n", type=int, help="grid cells per side")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("constants", help="print certified problem constants")
    sub.add_parser("gradcheck", help="finite-difference gradient battery")

    p_solve = sub.add_parser("solve", help="solve one sample-based problem")
    p_solve.add_argument("--problem", choices=PROBLEM_KINDS, required=True)
    p_solve.add_argument("--N", type=int, help="Monte Carlo sample size")
    p_solve.add_argument("--seed", type=int, default=101)
    p_solve.add_argument("--level-quad", type=int, dest="level_quad",
                         help="use a tensor quadrature rule of this level")
    p_solve.add_argument("--eps", type=float, help="stationarity tolerance")
    p_solve.add_argument("--out", default="out")

    for name, help_text in (
        ("sweep-mc", "Monte Carlo consistency sweep"),
        ("sweep-quad", "quadrature-level consistency sweep"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--problem", choices=PROBLEM_KINDS + ("both",), default="both")
        p.add_argument("--out", default="out")

    p_rep = sub.add_parser("report", help="re-render summaries and figures from a bundle")
    p_rep.add_argument("--bundle", required=True, help="summary JSON path")
    p_rep.add_argument("--out", help="output directory (default: alongside bundle)")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "constants":
            return cmd_constants(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        if args.command == "solve":
            return cmd_solve(args)
        if args.command == "sweep-mc":
            return cmd_sweep(args, quad=False)
        if args.command == "sweep-quad":
            return cmd_sweep(args, quad=True)
        if args.command == "report":
            return cmd_report(args)
        parser.error(f"unknown command {args.command}")
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SaaPdeError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
