"""Command line entry point: ``massflow {simulate,verify,localtime}``.

Exit codes: 0 success, 1 internal invariant violation, 2 invalid
configuration or arguments, 3 input/output failure, 4 a verification
check failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import calculus as fc
from . import verify as V
from .engine import Dynamics, EnsembleError, run_ensemble
from .io import ConfigError, RunManifest, SummaryAccumulator, load_config, write_csv, write_dump
from .state import StateCorruption, VerificationReport

log = logging.getLogger("massflow")

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG, EXIT_IO, EXIT_CHECK = 0, 1, 2, 3, 4


class _Exit(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="JSON config file")
    common.add_argument("--out", required=True, metavar="DIR", help="output directory")
    common.add_argument("--threads", type=int, default=1, metavar="K", help="worker threads (results do not depend on K)")
    common.add_argument("--dump-trajectories", action="store_true", help="write one binary dump per replica")
    common.add_argument("--inject-drift", type=float, default=0.0, metavar="X", help="test fixture: add drift X")
    common.add_argument(
        "--merge-rule", choices=("weighted", "midpoint"), default="weighted",
        help="test fixture: 'midpoint' ignores masses when merging",
    )
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="massflow", description="Coalescing heavy-particle flow simulator.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="run the ensemble and write summaries")
    v = sub.add_parser("verify", parents=[common], help="run statistical checks")
    v.add_argument("--checks", default="all", metavar="LIST", help="comma-separated check names or 'all'")
    lt = sub.add_parser("localtime", parents=[common], help="local-time profiles and the duality check")
    lt.add_argument("--a-min", type=float, default=-1.0)
    lt.add_argument("--a-max", type=float, default=2.0)
    lt.add_argument("--a-step", type=float, default=0.01)
    lt.add_argument("--t", dest="t_list", default=None, metavar="LIST", help="comma-separated times (default: horizon)")
    return p


def _dynamics(args) -> Dynamics:
    return Dynamics(drift=args.inject_drift, merge_rule=args.merge_rule)


def _options(args) -> dict:
    skip = {"config", "out", "verbose", "command"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _prepare(args):
    try:
        config = load_config(args.config)
    except OSError as exc:
        raise _Exit(EXIT_IO, f"cannot read config {args.config}: {exc.strerror or exc}") from None
    except ConfigError as exc:
        raise _Exit(EXIT_CONFIG, f"invalid config: {exc}") from None
    if args.threads < 1:
        raise _Exit(EXIT_CONFIG, "--threads: must be at least 1")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise _Exit(EXIT_IO, f"cannot write to {out}: {exc.strerror or exc}") from None
    manifest = RunManifest(
        command=args.command,
        config=config,
        version=__version__,
        convention=_dynamics(args).tag,
        options=_options(args),
    )
    return config, out, manifest


def _stream(config, args, out, manifest, consumers):
    """Run the ensemble once, feeding every record to each consumer."""
    dump_dir = out / "trajectories"
    if args.dump_trajectories:
        dump_dir.mkdir(exist_ok=True)

    def feed(record):
        log.info("replica %d: %d events", record.replica_index, len(record.events))
        for c in consumers:
            c(record)
        if args.dump_trajectories:
            path = dump_dir / f"replica_{record.replica_index:06d}.mfs"
            write_dump(path, record)
            manifest.register(path, out)

    run_ensemble(config, _dynamics(args), threads=args.threads, consumer=feed)


def _write_summaries(summary: SummaryAccumulator, out: Path, manifest: RunManifest) -> None:
    path = out / "clusters.csv"
    write_csv(path, ("t", "N_mean", "N_se"), summary.cluster_rows())
    manifest.register(path, out)
    path = out / "probes.csv"
    write_csv(path, ("u", "t", "y_mean", "y_se", "y_var", "mass_mean"), summary.probe_rows())
    manifest.register(path, out)


def _write_report(report: VerificationReport, out: Path, manifest: RunManifest) -> None:
    path = out / "report.json"
    path.write_text(json.dumps(report.to_list(), indent=2) + "\n")
    manifest.register(path, out)
    (out / "report.txt").write_text(report.table() + "\n")


def cmd_simulate(args) -> int:
    config, out, manifest = _prepare(args)
    summary = SummaryAccumulator(config)
    _stream(config, args, out, manifest, [summary.add])
    _write_summaries(summary, out, manifest)
    manifest.write(out)
    print(f"simulated {config.replicas} replica(s); outputs in {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    config, out, manifest = _prepare(args)
    names = [s.strip() for s in args.checks.split(",") if s.strip()]
    try:
        checks = V.default_checks(names, config)
    except ValueError as exc:
        raise _Exit(EXIT_CONFIG, str(exc)) from None
    summary = SummaryAccumulator(config)
    _stream(config, args, out, manifest, [summary.add] + [c.observe for c in checks])
    report = VerificationReport(convention=_dynamics(args).tag)
    for c in checks:
        report.add(*c.results())
    _write_summaries(summary, out, manifest)
    _write_report(report, out, manifest)
    manifest.write(out)
    print(report.table())
    return EXIT_OK if report.passed else EXIT_CHECK


def _parse_times(text, config) -> list[float]:
    if text is None:
        return [config.horizon]
    try:
        ts = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise _Exit(EXIT_CONFIG, f"--t: not a list of numbers: {text!r}") from None
    h = config.dt * config.record_stride
    for t in ts:
        on_grid = abs(t - config.horizon) < 1e-12 or abs(t / h - round(t / h)) < 1e-9
        if not (0 <= t <= config.horizon) or not on_grid:
            raise _Exit(EXIT_CONFIG, f"--t: {t} is not a recorded time in [0, {config.horizon}]")
    return ts


def cmd_localtime(args) -> int:
    config, out, manifest = _prepare(args)
    if config.record_stride != 1:
        raise _Exit(EXIT_CONFIG, "record_stride: local times need record_stride=1")
    if not args.a_step > 0:
        raise _Exit(EXIT_CONFIG, "--a-step: must be positive")
    if not args.a_max > args.a_min:
        raise _Exit(EXIT_CONFIG, "--a-max: must exceed --a-min")
    ts = _parse_times(args.t_list, config)
    a = np.arange(args.a_min, args.a_max + args.a_step / 2, args.a_step)
    f = fc.bump(0.5, 0.5)
    checks = [V.TanakaDuality(f, t, args.a_step) for t in ts]
    s1 = np.zeros((len(ts), len(a)))
    s2 = np.zeros_like(s1)
    rows = []
    count = 0

    def observe(record):
        nonlocal count
        L = fc.local_time_tanaka(record, a, ts).values
        s1[...] += L
        s2[...] += L * L
        count += 1
        for j, t in enumerate(ts):
            rows.extend((record.replica_index, float(x), float(t), float(v)) for x, v in zip(a, L[j]))

    _stream(config, args, out, manifest, [observe] + [c.observe for c in checks])
    mean = s1 / count
    se = np.sqrt(np.maximum(s2 - s1 * s1 / count, 0.0) / (count - 1) / count) if count > 1 else np.full_like(mean, np.nan)
    report = VerificationReport(convention=_dynamics(args).tag)
    for c in checks:
        report.add(*c.results())
    resid = [float(r.detail["mean_error"]) for r in report.results]
    path = out / "localtime.csv"
    write_csv(
        path,
        ("a", "t", "L_mean", "L_se", "duality_residual"),
        ((float(x), float(t), float(mean[j, i]), float(se[j, i]), resid[j]) for j, t in enumerate(ts)
         for i, x in enumerate(a)),
    )
    manifest.register(path, out)
    path = out / "localtime_replicas.csv"
    write_csv(path, ("replica", "a", "t", "L"), rows)
    manifest.register(path, out)
    _write_report(report, out, manifest)
    manifest.write(out)
    print(report.table())
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "verify": cmd_verify, "localtime": cmd_localtime}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors, matching the config-error code
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except _Exit as exc:
        print(f"massflow: {exc}", file=sys.stderr)
        return exc.code
    except EnsembleError as exc:
        cause = exc.__cause__
        if isinstance(cause, StateCorruption):
            print(f"massflow: invariant violated: {exc}", file=sys.stderr)
            return EXIT_INVARIANT
        if isinstance(cause, OSError):
            print(f"massflow: I/O failure: {exc}", file=sys.stderr)
            return EXIT_IO
        raise
    except StateCorruption as exc:
        print(f"massflow: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except OSError as exc:
        print(f"massflow: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
