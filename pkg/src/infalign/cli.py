"""Command-line entry point: ``infalign <command>``.

Exit codes: 0 success, 1 verification failure (including solver
non-convergence), 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import __version__, analytic, mc_oracle, plotting, suites
from .calibration import build_tables, empirical_calibrate
from .config import SweepConfig, load_config, resolve_transform
from .errors import ConfigError, InfAlignError, UnsupportedProcedure, VerificationError
from .fixedpoint import DEFAULT_DAMPING, DEFAULT_MAX_ITER, DEFAULT_TOL, solve_fixed_point
from .io import OutputCollector, OutputError, RecordFormatError, format_csv, format_records, read_records
from .procedures import BestOfN, RewindRepeat, WorstOfN
from .transforms import format_table_csv

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

CURVE_HEADER = ("beta", "kl", "win_rate", "transform", "procedure")
ORACLE_HEADER = mc_oracle.OracleRow.FIELDS


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9.+-]+", "_", label).strip("_")


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _sweep_config(args) -> SweepConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(seed=args.seed, grid=args.grid, trials=args.trials, out=args.out,
                              rewind_fallback=args.rewind_fallback)


# calibrate

def cmd_calibrate(args) -> int:
    if args.transform.startswith(("bon_fp:", "won_fp:")):
        raise ConfigError("fixed-point families depend on beta; export one with `infalign fixedpoint` "
                          "and pass it as table:<path>")
    transform = resolve_transform(args.transform)
    try:
        rows = read_records(args.input)
    except FileNotFoundError as exc:
        raise OutputError(f"cannot read {args.input}: {exc.strerror}") from None
    if not rows:
        raise RecordFormatError(f"{args.input}: no records")
    try:
        tables = build_tables(rec for _, rec in rows)
    except InfAlignError as exc:
        # duplicate (prompt_id, response_id) pairs are a defect of the input file
        raise RecordFormatError(f"{args.input}: {exc}") from None
    out_rows = []
    for obj, rec in rows:
        c = empirical_calibrate(tables[rec.prompt_id], rec.reward)
        new = dict(obj)
        new["calibrated"] = c
        new["transformed"] = float(transform(c))
        out_rows.append(new)
    stem = Path(args.input).name.split(".")[0] or "records"
    summary = {
        "transform": args.transform,
        "records": len(out_rows),
        "prompts": {pid: t.K for pid, t in sorted(tables.items())},
    }
    config = {"input": str(args.input), "transform": args.transform}
    with OutputCollector(args.out or "out", "calibrate", config) as out:
        out.write_text(f"{stem}.calibrated.jsonl", format_records(out_rows))
        out.write_text(f"{stem}.summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"calibrated {len(out_rows)} records over {len(tables)} prompts -> {out.out_dir}")
    return EXIT_OK


# curve

def _curve_points(transform, procedures, cfg: SweepConfig):
    """Points for one transform across all procedures; fixed-point families must converge."""
    if cfg.kl_targets is not None:
        betas = sorted(analytic.beta_for_kl(transform, k, cfg.grid) for k in cfg.kl_targets)
    else:
        betas = cfg.beta_values()
    policies = []
    for beta in betas:
        resolved = transform.for_beta(beta)
        if hasattr(transform, "solution"):
            sol = transform.solution(beta)
            if not sol.converged:
                raise VerificationError(f"{transform.label} did not converge at beta={beta!r} "
                                        f"(residual {sol.residual:.3g})")
        # refine the grid for sharply peaked policies (large tilt at small beta)
        policies.append((beta, analytic.build_resolved(resolved, beta, cfg.grid)))
    out = {}
    for proc in procedures:
        pts = [analytic.TradeoffPoint(beta, analytic.kl_divergence(pol), analytic.win_rate(pol, proc),
                                      proc.label, transform.label) for beta, pol in policies]
        out[proc.label] = sorted(pts, key=lambda p: (p.kl, p.beta))
    return out


def cmd_curve(args) -> int:
    cfg = _sweep_config(args)
    if args.png:
        cfg = cfg.with_overrides(png=True)
    cfg.validate_specs()
    procedures = cfg.resolved_procedures()
    for proc in procedures:
        if isinstance(proc, RewindRepeat) and proc.fallback != "last":
            raise ConfigError("curves need an analytic win rate; rewind fallback 'best' is only "
                              "available in `infalign simulate`")
    transforms = cfg.resolved_transforms()
    threads = mc_oracle.thread_count()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda t: _curve_points(t, procedures, cfg), transforms))
    else:
        results = [_curve_points(t, procedures, cfg) for t in transforms]

    with OutputCollector(cfg.out, "curve", cfg.to_dict(), cfg.seed) as out:
        for proc in procedures:
            series = {}
            for t, res in zip(transforms, results):
                pts = res[proc.label]
                rows = [(p.beta, p.kl, p.win_rate, t.label, proc.label) for p in pts]
                out.write_text(f"curve_{_slug(t.label)}__{_slug(proc.label)}.csv", format_csv(CURVE_HEADER, rows))
                series[t.label] = [(p.kl, p.win_rate) for p in pts]
            title = f"win rate vs KL, {proc.label}"
            out.write_text(f"tradeoff_{_slug(proc.label)}.svg", plotting.tradeoff_svg(series, title))
            if cfg.png:
                try:
                    png = plotting.tradeoff_png(series, title)
                except ImportError:
                    _say("matplotlib is not installed; skipping PNG output")
                else:
                    out.write_bytes(f"tradeoff_{_slug(proc.label)}.png", png)
    print(f"wrote {len(out.outputs)} files to {out.out_dir}")
    return EXIT_OK


# fixedpoint

def cmd_fixedpoint(args) -> int:
    if args.n < 1:
        raise ConfigError("N must be a positive integer")
    proc = BestOfN(args.n) if args.kind == "bon" else WorstOfN(args.n)
    grid = args.grid or analytic.DEFAULT_GRID
    sol = solve_fixed_point(proc, args.beta, grid, args.tol, args.max_iter, args.damping)
    meta = {
        "kind": f"{args.kind}_fp",
        "N": args.n,
        "beta": repr(float(args.beta)),
        "grid": grid,
        "converged": str(sol.converged).lower(),
        "residual": repr(sol.residual),
        "iterations": sol.iterations,
        "tol": repr(float(args.tol)),
    }
    if not sol.converged:
        _say(f"{args.kind}_fp N={args.n} beta={args.beta} did not converge after {sol.iterations} "
             f"iterations: residual {sol.residual:.6g} > tol {args.tol:g}")
        return EXIT_VERIFY
    name = args.table or f"{args.kind}_fp_N{args.n}_beta{_slug(repr(float(args.beta)))}.csv"
    config = {"kind": args.kind, "N": args.n, "beta": args.beta, "grid": grid, "tol": args.tol,
              "max_iter": args.max_iter, "damping": args.damping}
    with OutputCollector(args.out or "out", "fixedpoint", config) as out:
        path = out.write_text(name, format_table_csv(sol.values, meta))
    print(f"converged in {sol.iterations} iterations (residual {sol.residual:.3g}) -> {path}")
    return EXIT_OK


# simulate

def _simulate_cell(t, beta, proc, cfg: SweepConfig, seed: int, base: str):
    try:
        return mc_oracle.oracle_cell(t, beta, proc, cfg.trials, seed, base, cfg.grid).as_tuple()
    except UnsupportedProcedure:
        # no closed form (rewind with fallback 'best'): report the estimate alone
        a = mc_oracle.ToyModel(base, t, beta, seed, cfg.grid)
        b = mc_oracle.ToyModel(base, None, 1.0, seed, cfg.grid)
        est = mc_oracle.estimate_win_rate(a, b, proc, cfg.trials)
        return (t.label, float(beta), proc.label, "", est.value, est.std_error, "")


def cmd_simulate(args) -> int:
    cfg = _sweep_config(args)
    cfg.validate_specs()
    procedures = cfg.resolved_procedures()
    transforms = cfg.resolved_transforms()
    rows = []
    for ti, t in enumerate(transforms):
        if cfg.kl_targets is not None:
            betas = [analytic.beta_for_kl(t, k, cfg.grid) for k in cfg.kl_targets]
        else:
            betas = cfg.beta_values()
        for bi, beta in enumerate(betas):
            for pi, proc in enumerate(procedures):
                seed = suites._cell_seed(cfg.seed, ti, bi, pi)
                rows.append(_simulate_cell(t, beta, proc, cfg, seed, args.base))
    config = cfg.to_dict() | {"base": args.base}
    with OutputCollector(cfg.out, "simulate", config, cfg.seed) as out:
        out.write_text("oracle.csv", format_csv(ORACLE_HEADER, rows))
    scored = [r for r in rows if r[-1] != ""]
    within = sum(abs(r[-1]) <= 3 for r in scored)
    print(f"{len(rows)} cells, {within}/{len(scored)} within 3 standard errors -> {out.out_dir}")
    return EXIT_OK


# verify

def cmd_verify(args) -> int:
    names = args.suite or ["trivial"]
    if "all" in names:
        names = list(suites.SUITES)
    unknown = [n for n in names if n not in suites.SUITES]
    if unknown:
        raise ConfigError(f"unknown suite(s) {', '.join(unknown)}; choose from {', '.join(suites.SUITES)}, all")
    seed = args.seed if args.seed is not None else 0
    trials = args.trials if args.trials is not None else mc_oracle.DEFAULT_TRIALS
    grid = args.grid or analytic.DEFAULT_GRID
    checks = []
    for name in names:
        checks.extend(suites.run_suite(name, seed=seed, trials=trials, M=grid))
    width = max(len(c.name) for c in checks)
    for c in checks:
        print(f"{c.suite:<12} {c.name:<{width}}  {'PASS' if c.passed else 'FAIL'}  {c.detail}")
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    if args.out:
        config = {"suites": names, "seed": seed, "trials": trials, "grid": grid}
        with OutputCollector(args.out, "verify", config, seed) as out:
            out.write_text("verify.jsonl", format_records(c.as_record() for c in checks))
    return EXIT_OK if failed == 0 else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML sweep configuration")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--grid", type=int, help="quadrature grid size M (odd)")
    common.add_argument("--trials", type=int, help="Monte Carlo trials per estimate")
    common.add_argument("--out", help="output directory")
    common.add_argument("--rewind-fallback", choices=("last", "best"),
                        help="output of rewind-and-repeat when every draw misses the threshold")

    parser = argparse.ArgumentParser(prog="infalign", description="Calibrate rewards, trace win-rate vs KL tradeoffs and solve for optimised transforms.",
                                     epilog="exit codes: 0 ok, 1 verification failure, 2 configuration error, 3 I/O error")
    parser.add_argument("--version", action="version", version=f"infalign {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", parents=[common], help="calibrate and transform reward records")
    p.add_argument("input", help="line-delimited JSON with prompt_id, response_id, reward")
    p.add_argument("--transform", default="identity", help="transform spec (default: identity)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("curve", parents=[common], help="analytic win-rate vs KL curves")
    p.add_argument("--png", action="store_true", help="also render PNG charts with matplotlib")
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("fixedpoint", parents=[common], help="solve for an optimised transform")
    p.add_argument("--n", type=int, required=True, help="number of draws N")
    p.add_argument("--beta", type=float, required=True, help="regularisation strength")
    p.add_argument("--kind", choices=("bon", "won"), default="bon", help="best-of-N or worst-of-N (default: bon)")
    p.add_argument("--tol", type=float, default=DEFAULT_TOL, help="sup-norm residual tolerance (default: %(default)g)")
    p.add_argument("--max-iter", type=int, default=DEFAULT_MAX_ITER, help="iteration cap (default: %(default)d)")
    p.add_argument("--damping", type=float, default=DEFAULT_DAMPING, help="initial damping in (0, 1] (default: %(default)g)")
    p.add_argument("--table", help="output file name inside --out")
    p.set_defaults(func=cmd_fixedpoint)

    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo check of analytic win rates")
    p.add_argument("--base", choices=mc_oracle.BASE_DISTRIBUTIONS, default="uniform",
                   help="base reward distribution of the toy model")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", parents=[common], help="run verification suites")
    p.add_argument("--suite", action="append", help=f"one of {', '.join(suites.SUITES)}, all (repeatable)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _say(f"configuration error: {exc}")
        return EXIT_CONFIG
    except (RecordFormatError, OutputError) as exc:
        _say(f"error: {exc}")
        return EXIT_IO
    except VerificationError as exc:
        _say(f"verification failed: {exc}")
        return EXIT_VERIFY
    except OSError as exc:
        _say(f"I/O error: {exc}")
        return EXIT_IO
    except InfAlignError as exc:
        # bad numeric arguments (beta <= 0, invalid N, ...)
        _say(f"invalid argument: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
