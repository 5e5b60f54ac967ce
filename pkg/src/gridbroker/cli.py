"""Command-line entry point: ``broker submit | recover | status | bench``.

Exit codes: 0 when every job is DONE, 1 when some job failed, 2 when the
run could not start (bad documents, missing credentials, locked store).
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import interpreters
from .bench import PROFILES, bench
from .broker import RunConfig, recover_cli, run, status
from .errors import BrokerError
from .scheduler import PolicyKind

EXIT_STARTUP = 2


def _add_run_options(p):
    p.add_argument("--policy", default="round_robin",
                   help="round_robin | cost | time | data_aware")
    p.add_argument("--active-set", type=int, default=100)
    p.add_argument("--poll-interval", type=float, default=12.0)
    p.add_argument("--poll-retries", type=int, default=3)
    p.add_argument("--max-attempts", type=int, default=3)
    p.add_argument("--staging", choices=("push", "pull"), default="push")
    p.add_argument("--out", default="broker-out")
    p.add_argument("--sim-config", help="YAML settings for the sim adapter")
    p.add_argument("--sim-state", help="file where the sim adapter keeps its state")
    p.add_argument("--workroot", help="job working directories for the local adapter")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="broker", description="Parameter-sweep job broker")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("submit", help="expand an application and run it to completion")
    p.add_argument("--app", required=True)
    p.add_argument("--services", required=True)
    p.add_argument("--credentials")
    p.add_argument("--store", default="broker-store")
    p.add_argument("--instance", help="instance id (default: a fresh random id)")
    _add_run_options(p)

    p = sub.add_parser("recover", help="resume a crashed or stopped instance")
    p.add_argument("--store", required=True)
    p.add_argument("--instance", required=True)
    p.add_argument("--credentials")
    p.add_argument("--out", help="report directory (default: the instance's own)")
    p.add_argument("--sim-state")

    p = sub.add_parser("status", help="print a snapshot of an instance")
    p.add_argument("--store", required=True)
    p.add_argument("--instance", required=True)

    p = sub.add_parser("bench", help="run a synthetic job profile and print its metrics")
    p.add_argument("--profile", choices=sorted(PROFILES), required=True)
    p.add_argument("--jobs", type=int, default=50)
    p.add_argument("--adapter", choices=("sim", "local"), default="sim")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--real-clock", action="store_true",
                   help="measure wall time with real processes (implies --adapter local)")
    p.add_argument("--time-scale", type=float, default=0.01,
                   help="job length multiplier for the local adapter")
    p.add_argument("--workdir")
    return ap


def _creds(path):
    if not path:
        return []
    return interpreters.parse_credentials(interpreters.load_document(path, "credentials"))


def _print_report(report):
    print(report.table(), end="")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "submit":
            try:
                PolicyKind.parse(args.policy)
                ctx, services, creds = interpreters.load_all(args.app, args.services,
                                                             args.credentials)
            except (BrokerError, ValueError, OSError) as e:
                print(f"broker: {e}", file=sys.stderr)
                return EXIT_STARTUP
            cfg = RunConfig(policy=args.policy, active_set=args.active_set,
                            poll_interval_s=args.poll_interval, poll_retries=args.poll_retries,
                            max_attempts=args.max_attempts, staging_mode=args.staging,
                            out_dir=args.out, store_dir=args.store, sim_config=args.sim_config,
                            sim_state=args.sim_state, workroot=args.workroot,
                            services_path=args.services)
            report = run(ctx, services, creds, cfg, instance_id=args.instance)
            print(f"instance: {report.instance_id}")
            _print_report(report)
            return report.exit_code
        if args.command == "recover":
            overrides = {}
            if args.out:
                overrides["out_dir"] = args.out
            if args.sim_state:
                overrides["sim_state"] = args.sim_state
            cfg = RunConfig(store_dir=args.store)
            report = recover_cli(args.store, args.instance, _creds(args.credentials), cfg,
                                 **overrides)
            _print_report(report)
            return report.exit_code
        if args.command == "status":
            print(status(args.store, args.instance), end="")
            return 0
        if args.command == "bench":
            adapter = "local" if args.real_clock else args.adapter
            res = bench(args.profile, args.jobs, adapter, seed=args.seed,
                        time_scale=args.time_scale, workdir=args.workdir)
            print(res.table(), end="")
            return res.report.exit_code
    except (BrokerError, ValueError) as e:
        print(f"broker: {e}", file=sys.stderr)
        return EXIT_STARTUP
    return EXIT_STARTUP


if __name__ == "__main__":
    sys.exit(main())
