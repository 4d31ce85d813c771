"""Command line entry point: ``tierfs-harness run <scenario>`` and ``tierfs-harness verify-log <nodeDir>``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..raftlog import verify_dir
from .runner import run_scenario
from .scenario import ScenarioError, bundled_scenarios, load_scenario


def _run(args) -> int:
    try:
        sc = load_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"{args.scenario}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError:
        print(f"{args.scenario}: no such scenario (bundled: {', '.join(bundled_scenarios())})", file=sys.stderr)
        return 2
    report = run_scenario(sc, seed=args.seed, workdir=args.workdir)
    if args.trace:
        Path(args.trace).write_text("\n".join(report.trace) + "\n")
    if args.metrics:
        Path(args.metrics).write_text(report.metrics_text())
    for name, ok in sorted(report.checks.items()):
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    for finding in report.findings:
        print(f"  {finding}")
    if not args.metrics:
        sys.stdout.write(report.metrics_text())
    return 0 if report.ok else 1


def _verify_log(args) -> int:
    node_dir = Path(args.node_dir)
    if not (node_dir / "wal.log").exists():
        print(f"{node_dir}: no wal.log", file=sys.stderr)
        return 2
    good, bad = verify_dir(node_dir)
    if bad is not None:
        print(f"corrupt entry {bad} after {good} good entries")
        return 1
    print(f"ok {good} entries")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="tierfs-harness")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario file (or the name of a bundled scenario)")
    run.add_argument("scenario")
    run.add_argument("--seed", type=int)
    run.add_argument("--trace", help="write the event trace here")
    run.add_argument("--metrics", help="write 'key value' metrics here")
    run.add_argument("--workdir", help="keep node directories here instead of a temporary directory")
    vl = sub.add_parser("verify-log", help="check every checksum in a node's log")
    vl.add_argument("node_dir")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if args.command == "run":
        return _run(args)
    return _verify_log(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
