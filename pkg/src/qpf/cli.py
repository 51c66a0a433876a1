"""Command-line interface: ``qpf simulate | estimate | validate | diagnose``.

Exit codes: 0 success (estimate: hypotheses discriminated), 2 estimate ran
but no hypothesis reached the discrimination threshold, 64 usage error,
1 any other failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from qpf import __version__
from qpf.config import TaskConfig, load_config
from qpf.diffusive import record_seed, simulate_records
from qpf.discrete import DiscreteRecord, simulate_trajectory
from qpf.errors import DimensionMismatch, FormatError, InvalidConfiguration, QPFError, UnknownSuite
from qpf.estimation import (
    DISCRIMINATION_THRESHOLD,
    EstimationTask,
    PosteriorTrace,
    refine_grid,
    run_estimation,
    submartingale_diagnostic,
)
from qpf.recordfile import CONTINUOUS, DISCRETE, KIND_NAMES, read_records, write_records
from qpf.suites import SUITES, run_suite

EXIT_OK, EXIT_FAILURE, EXIT_UNDISCRIMINATED, EXIT_USAGE = 0, 1, 2, 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _workers(cfg: TaskConfig) -> int:
    env = os.environ.get("QPF_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InvalidConfiguration(f"QPF_WORKERS must be an integer, got {env!r}") from None
    return cfg.workers


def _truth(cfg: TaskConfig):
    truth = cfg.simulate.get("truth")
    return cfg.model_params[cfg.parameter] if truth is None else truth


def _initial_state(cfg: TaskConfig, sid: int):
    if sid not in cfg.initial_states:
        raise InvalidConfiguration(f"initial state {sid} is not defined in [initial_states]")
    return cfg.initial_states[sid]


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    if not cfg.simulate:
        raise InvalidConfiguration("simulate needs a [simulate] section")
    seed = cfg.seed if args.seed is None else args.seed
    sim = cfg.simulate
    model = cfg.model(_truth(cfg))
    sid = sim["initial_state"]
    rho0 = _initial_state(cfg, sid)
    if cfg.kind == "diffusive":
        if cfg.dt is None:
            raise InvalidConfiguration("[run] dt is required to simulate diffusive records")
        records = simulate_records(model, sim["n_records"], sim["length"], cfg.dt, rho0, seed, sid)
        m = model.n_measured
    else:
        records = []
        for n in range(sim["n_records"]):
            rng = np.random.default_rng(record_seed(seed, n))
            outcomes, _ = simulate_trajectory(model, rho0, sim["length"], rng)
            records.append(DiscreteRecord(tuple(outcomes), sid))
        m = model.base.n_outcomes
    if not records and cfg.kind == "diffusive":
        raise InvalidConfiguration("cannot write a continuous file without records (dt unknown)")
    size = write_records(args.output, records, model.dim, m)
    steps = sum(len(r) for r in records)
    print(f"records={len(records)} steps={steps} bytes={size} -> {args.output}")
    return EXIT_OK


def _load_task(cfg: TaskConfig, paths) -> EstimationTask:
    paths = list(paths) or [cfg.resolve(p) for p in cfg.record_paths]
    if not paths:
        raise InvalidConfiguration("no record files given (use -r or [records] paths)")
    family = cfg.family()
    want_kind = CONTINUOUS if cfg.kind == "diffusive" else DISCRETE
    records = []
    for path in paths:
        rs = read_records(path, gain=cfg.gain)
        if rs.kind != want_kind:
            raise FormatError(f"{path}: {KIND_NAMES[rs.kind]} records but a {cfg.kind} model")
        if rs.dim != family.dim:
            raise DimensionMismatch(f"{path}: records have dim {rs.dim}, model has {family.dim}")
        if want_kind == CONTINUOUS:
            if rs.m != family.n_measured:
                raise DimensionMismatch(f"{path}: {rs.m} measured channels, model has {family.n_measured}")
            if cfg.dt is not None and not np.isclose(rs.dt, cfg.dt, rtol=1e-12, atol=0):
                raise DimensionMismatch(f"{path}: dt {rs.dt} differs from [run] dt {cfg.dt}")
        else:
            n_out = family.models[0].base.n_outcomes
            if rs.m > n_out:
                raise DimensionMismatch(f"{path}: {rs.m} outcomes, model has {n_out}")
        records.extend(rs.records)
    return EstimationTask(family, records, cfg.initial_states, cfg.prior)


def write_trace_csv(path, trace: PosteriorTrace) -> None:
    r = len(trace.labels)
    lines = [",".join(["records_processed"] + [f"pi_{i}" for i in range(1, r + 1)]
                      + [f"loglik_{i}" for i in range(1, r + 1)])]
    for cp in trace.checkpoints:
        lines.append(",".join([str(cp.records_processed)] + [repr(float(v)) for v in cp.pi]
                              + [repr(float(v)) for v in cp.loglik]))
    Path(path).write_text("\n".join(lines) + "\n")


def trace_summary(trace: PosteriorTrace) -> dict:
    summary = {
        "labels": list(trace.labels),
        "records_processed": trace.final.records_processed,
        "final_pi": [float(v) for v in trace.final.pi],
        "final_loglik": [float(v) for v in trace.final.loglik],
        "winner": trace.winner,
        "discriminated": trace.discriminated,
        "threshold": DISCRIMINATION_THRESHOLD,
        "floor_events": [int(v) for v in trace.floors],
    }
    try:
        refinement = refine_grid(trace, shrink=0.5)
    except QPFError:
        return summary
    summary["half_spacing"] = refinement.half_spacing
    summary["suggested_grid"] = list(refinement.candidates)
    return summary


def cmd_estimate(args) -> int:
    cfg = load_config(args.config)
    task = _load_task(cfg, args.records or [])
    trace = run_estimation(task, cfg.checkpoint_every, workers=_workers(cfg))
    write_trace_csv(args.output, trace)
    summary = trace_summary(trace)
    summary_path = Path(args.output).with_suffix(".summary.json")
    summary_path.write_text(json.dumps(summary, indent=2) + "\n")
    flags = "" if trace.discriminated else " (no discrimination)"
    print(f"winner={trace.winner} pi={trace.final.pi.max():.6f}{flags} -> {args.output}, {summary_path}")
    for label, n in zip(trace.labels, trace.floors):
        if n:
            print(f"warning: hypothesis {label} hit the likelihood floor {n} times", file=sys.stderr)
    return EXIT_OK if trace.discriminated else EXIT_UNDISCRIMINATED


def cmd_validate(args) -> int:
    checks = run_suite(args.suite, args.seed)
    for check in checks:
        print(check.line())
    ok = all(c.passed for c in checks)
    print(f"suite {args.suite}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAILURE


def cmd_diagnose(args) -> int:
    cfg = load_config(args.config)
    family = cfg.family()
    truth = _truth(cfg)
    sid = cfg.simulate.get("initial_state", 0)
    rho0 = _initial_state(cfg, sid)
    rho_filter = np.eye(family.dim) / family.dim if args.mismatch else rho0
    seed = cfg.seed if args.seed is None else args.seed
    report = submartingale_diagnostic(
        family, truth, args.n_traj, args.len, rho0, rho_filter, seed=seed,
        dt=cfg.dt, truth_model=cfg.model(truth),
    )
    print("k,mean_pi,se_pi,mean_F,se_F,mean_piF,se_piF")
    for k in range(args.len + 1):
        row = [report.pi, report.fidelity, report.pi_fidelity]
        print(",".join([str(k)] + [f"{s.mean[k]:.10g},{s.stderr[k]:.3g}" for s in row]))
    for name, series in (("pi", report.pi), ("F", report.fidelity), ("pi*F", report.pi_fidelity)):
        print(f"[{'PASS' if series.passed else 'FAIL'}] {name} non-decreasing within 3 SE "
              f"(margin {series.margin:.3g})")
    return EXIT_OK if report.passed else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qpf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"qpf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate measurement records")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="run the particle filter over record files")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("-r", "--records", action="append")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("validate", help="run a built-in property suite")
    p.add_argument("--suite", required=True, help=", ".join(SUITES))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("diagnose", help="Monte Carlo sub-martingale diagnostic")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--n-traj", type=int, default=2000)
    p.add_argument("--len", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.add_argument("--mismatch", action="store_true", help="start the filter from the maximally mixed state")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UnknownSuite as exc:
        print(f"qpf: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (QPFError, OSError) as exc:
        print(f"qpf: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
