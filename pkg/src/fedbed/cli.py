"""Experimenter-facing command line.

Exit codes: 0 success, 1 validation error (bad config, unknown job),
2 runtime failure (job failed or export error).
"""

from __future__ import annotations

import argparse
import logging
import sys

from fedbed import orchestrator
from fedbed.config import ConfigError, parse_config
from fedbed.emulator import BUILTIN_PROFILES

DEFAULT_JOBS_DIR = "fedbed_jobs"


def _cmd_launch_job(args) -> int:
    cfg = parse_config(args.config)
    handle = orchestrator.launch_job(cfg, args.jobs_dir, wait=False)
    print(handle.job_id.value, flush=True)
    state = handle.wait(args.timeout)
    print(f"state: {state}", flush=True)
    return 0 if state == orchestrator.STATE_FINISHED else 2


def _cmd_get_metrics(args) -> int:
    try:
        files = orchestrator.get_metrics(args.job_id, args.jobs_dir, args.out)
    except orchestrator.UnknownJobError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except orchestrator.JobStillRunningError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for name in sorted(files):
        print(f"{name}: {files[name]}")
    return 0


def _cmd_status(args) -> int:
    try:
        status = orchestrator.job_status(args.job_id, args.jobs_dir)
    except orchestrator.UnknownJobError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(status.state)
    for p in status.procs:
        code = "running" if p.alive else f"exit={p.exit_code}"
        print(f"  {p.role} pid={p.pid} {code}")
    return 0


def _cmd_profiles(args) -> int:
    if args.action == "list":
        columns = ("name", "samples/s", "idle W", "delta W", "up bps", "down bps")
        print("{:<18}{:>10}{:>8}{:>9}{:>12}{:>12}".format(*columns))
        for name in sorted(BUILTIN_PROFILES):
            p = BUILTIN_PROFILES[name]
            print(
                f"{name:<18}{p.samples_per_second:>10.0f}{p.idle_power_w:>8.2f}"
                f"{p.active_power_delta_w:>9.2f}{p.uplink_bps:>12.0f}{p.downlink_bps:>12.0f}"
            )
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="fedbed", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("launch-job", help="run an experiment described by a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--jobs-dir", default=DEFAULT_JOBS_DIR)
    p.add_argument("--timeout", type=float, default=None, help="job timeout in wall seconds")
    p.set_defaults(func=_cmd_launch_job)

    p = sub.add_parser("get-metrics", help="export CSVs and the summary for a finished job")
    p.add_argument("--job-id", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--jobs-dir", default=DEFAULT_JOBS_DIR)
    p.set_defaults(func=_cmd_get_metrics)

    p = sub.add_parser("status", help="show job state and per-process status")
    p.add_argument("--job-id", required=True)
    p.add_argument("--jobs-dir", default=DEFAULT_JOBS_DIR)
    p.set_defaults(func=_cmd_status)

    p = sub.add_parser("profiles", help="inspect emulated device profiles")
    p.add_argument("action", choices=["list"])
    p.set_defaults(func=_cmd_profiles)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except orchestrator.LaunchError as exc:
        print(f"launch error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
