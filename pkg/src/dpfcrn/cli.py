"""Command line: ``run``, ``audit``, ``derive`` and ``plot``.

Exit codes: 0 success, 2 configuration or precondition failure, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, build_problem, derive_schedule
from .errors import (AuditError, CalibrationError, CompositionError, ConfigurationError,
                     ParseError)
from .experiment import MetricsTable, emit_outputs, read_metrics, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
PRECONDITION_ERRORS = (ConfigurationError, CalibrationError, CompositionError, AuditError,
                       ParseError, FileNotFoundError)

log = logging.getLogger("dpfcrn")


def _seeds(text):
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers: {text!r}")


def _sweep(text):
    key, sep, raw = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"sweep {text!r} is not key=[v1,v2,...]")
    try:
        values = json.loads(raw)
    except json.JSONDecodeError:
        values = raw.split(",")
    if not isinstance(values, list) or not values:
        raise argparse.ArgumentTypeError(f"sweep {key} needs a non-empty list")
    return key, values


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    pairs = list(args.override or [])
    if getattr(args, "algorithm", None):
        pairs.append(f"algorithm={args.algorithm}")
    if getattr(args, "seeds", None):
        pairs.append("seeds=" + json.dumps(list(args.seeds)))
    return cfg.with_overrides(pairs) if pairs else cfg


def expand_sweep(cfg: ExperimentConfig, sweeps) -> list[ExperimentConfig]:
    if not sweeps:
        return [cfg]
    keys = [k for k, _ in sweeps]
    out = []
    for combo in itertools.product(*(v for _, v in sweeps)):
        out.append(cfg.with_overrides(f"{k}={json.dumps(v)}" for k, v in zip(keys, combo)))
    return out


def _summary_line(cfg, table):
    problem = build_problem(cfg)
    sched = derive_schedule(cfg, problem.m, problem.d)
    med = table.median_final("subopt")
    key = (cfg.algorithm, float(cfg.epsilon), sched.k / problem.d)
    led = sched.ledger
    return (f"{cfg.algorithm:7s} eps={cfg.epsilon:<5g} k/d={sched.k / problem.d:<6.3g} "
            f"tau={sched.tau:<6d} T={sched.T:<6d} sigma^2={sched.sigma_sq:<10.4g} "
            f"eps_composed={led.composed_eps:<8.4g} median_final_subopt={med.get(key, float('nan')):.6g}")


def cmd_run(args) -> int:
    cfg = load_config(args)
    configs = expand_sweep(cfg, args.sweep)
    out = Path(args.out or cfg.output_dir)
    table = MetricsTable()
    code = EXIT_OK
    for c in configs:
        try:
            part = run_experiment(c)
        except PRECONDITION_ERRORS:
            raise
        except Exception as exc:
            part = getattr(exc, "partial", None)
            if part is not None:
                table.extend(part)
                emit_outputs(table, out)
            raise
        table.extend(part)
        print(_summary_line(c, part))
    if not table.rows:
        print("no rounds to record (T = 0); nothing written")
        return code
    for p in emit_outputs(table, out):
        print(f"wrote {p}")
    if not args.no_figures:
        from .plotting import render_all
        for p in render_all(table, out):
            print(f"wrote {p}")
    return code


def cmd_audit(args) -> int:
    cfg = load_config(args)
    sched = derive_schedule(cfg)
    print(sched.ledger.to_json(indent=2))
    return EXIT_OK if sched.ledger.valid or not cfg.private else EXIT_CONFIG


def cmd_derive(args) -> int:
    cfg = load_config(args)
    sched = derive_schedule(cfg)
    print(f"tau={sched.tau}")
    print(f"T={sched.T}")
    print(f"sigma_sq={sched.sigma_sq!r}")
    return EXIT_OK


def cmd_plot(args) -> int:
    table = MetricsTable()
    for path in args.metrics:
        table.extend(read_metrics(path))
    from .plotting import render_all
    for p in render_all(table, args.out):
        print(f"wrote {p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dpfcrn", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-seed progress")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="override a config field (value parsed as JSON); repeatable")
        return p

    run = with_config(sub.add_parser("run", help="train and write metrics, manifest and plots"))
    run.add_argument("--out", help="output directory (default: config output_dir)")
    run.add_argument("--seeds", type=_seeds, help="comma-separated seeds, e.g. 1,2,3")
    run.add_argument("--algorithm", choices=("dpfcrn", "fedsgd"))
    run.add_argument("--sweep", action="append", type=_sweep, metavar="KEY=[V1,V2,...]",
                     help="run the cartesian product of these values into one table; repeatable")
    run.add_argument("--no-figures", action="store_true", help="skip the matplotlib PNGs")
    run.set_defaults(func=cmd_run)

    audit = with_config(sub.add_parser("audit", help="print the privacy ledger without training"))
    audit.add_argument("--algorithm", choices=("dpfcrn", "fedsgd"))
    audit.set_defaults(func=cmd_audit)

    derive = with_config(sub.add_parser("derive", help="print tau, T and sigma^2"))
    derive.add_argument("--algorithm", choices=("dpfcrn", "fedsgd"))
    derive.set_defaults(func=cmd_derive)

    plot = sub.add_parser("plot", help="render PNG figures from one or more metrics.csv files")
    plot.add_argument("metrics", nargs="+")
    plot.add_argument("--out", default=".")
    plot.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PRECONDITION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
