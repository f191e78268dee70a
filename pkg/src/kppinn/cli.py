"""Command-line entry point: ``kppinn {solve,inverse,bench-kinv,validate}``."""

from __future__ import annotations

import argparse
import json
import re
import sys
from dataclasses import replace
from pathlib import Path

from .bench import emit_report, load_config, run_experiment, time_kinverse
from .kernel_core import MaternParams
from .losses import DenseCapError, build_operators

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3


def _seeds(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not seeds or min(seeds) < 0:
        raise argparse.ArgumentTypeError("need at least one non-negative seed")
    return seeds


def _slug(text):
    return re.sub(r"[^A-Za-z0-9.]+", "_", text).strip("_").lower()


def build_parser():
    p = argparse.ArgumentParser(prog="kppinn", description="Neural PDE solvers with kernel-packet RKHS losses.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="YAML experiment config")
        sp.add_argument("--out", type=Path, default=None, help="output directory (default runs/<problem>_<mode>)")
        sp.add_argument("--seeds", type=_seeds, default=None, help="comma-separated seeds, e.g. 0,1,2")
        sp.add_argument("--dry-run", action="store_true", help="validate, build factors, run 2 iterations")

    common(sub.add_parser("solve", help="train forward problems"))
    common(sub.add_parser("inverse", help="train inverse problems (theta learned jointly)"))
    v = sub.add_parser("validate", help="check a config and build its factors")
    v.add_argument("config")

    b = sub.add_parser("bench-kinv", help="time K^{-1} construction plus one quadratic form")
    g = b.add_mutually_exclusive_group(required=True)
    g.add_argument("--n", type=int, help="1-D grid size")
    g.add_argument("--grid", help="tensor grid, e.g. 200x300")
    b.add_argument("--nu", type=float, default=0.5)
    b.add_argument("--ell", type=float, default=1.0)
    b.add_argument("--method", choices=("kp", "dense", "both"), default="both")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--out", type=Path, default=None, help="also write kinv.json here")
    return p


def _check_factors(cfg):
    problem = cfg.make_problem()
    for spec in cfg.losses:
        if spec.kind is not None:
            try:
                build_operators(problem, spec.kind, cfg.mode)
            except DenseCapError as exc:
                print(f"note: {spec.label} will be skipped ({exc})", file=sys.stderr)
    return problem


def _run(args, mode):
    cfg = load_config(args.config, mode=mode)
    if args.seeds:
        cfg = replace(cfg, seeds=tuple(args.seeds))
    _check_factors(cfg)
    out = args.out or Path("runs") / f"{cfg.problem}_{cfg.mode}"
    diverged = False
    for spec in cfg.losses:
        traces = {}
        report = run_experiment(cfg, spec, n_iter=2 if args.dry_run else None, traces=traces)
        sub = out / _slug(spec.label) if len(cfg.losses) > 1 else out
        emit_report(report, sub, traces, results_csv=out / "results.csv")
        diverged |= any(s == "diverged" for s in report.status)
        mean = "n/a" if report.mean is None else f"{report.mean:.4e} +- {report.se:.2e}"
        theta = "" if cfg.mode == "forward" else f"  theta={report.theta_hat}"
        print(f"{cfg.problem} {cfg.mode} {spec.label}: rel_l2 {mean}{theta}  [{', '.join(report.status)}]")
    return EXIT_DIVERGED if diverged else EXIT_OK


def _bench(args):
    params = MaternParams(args.nu, args.ell)
    grid = args.n if args.n is not None else args.grid
    methods = ("kp", "dense") if args.method == "both" else (args.method,)
    stats = [time_kinverse(grid, params, m, repeats=args.repeats) for m in methods]
    for s in stats:
        print(f"{s.method:5s} n={s.n:<8d} median {s.median:.4f}s  min {s.min:.4f}s  yKy={s.value:.10g}")
    if len(stats) == 2:
        print(f"speedup (dense/kp, median): {stats[1].median / stats[0].median:.2f}x")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        payload = [{"method": s.method, "n": s.n, "median": s.median, "min": s.min, "times": s.times, "value": s.value}
                   for s in stats]
        (args.out / "kinv.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            cfg = load_config(args.config)
            _check_factors(cfg)
            print(f"{args.config}: ok ({cfg.problem}, {len(cfg.losses)} loss variant(s), seeds {list(cfg.seeds)})")
            return EXIT_OK
        if args.command == "bench-kinv":
            return _bench(args)
        return _run(args, "forward" if args.command == "solve" else "inverse")
    except ValueError as exc:  # includes ConfigError and DatasetError
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
