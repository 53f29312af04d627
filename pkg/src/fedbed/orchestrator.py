"""Job lifecycle: materialize data shards, spawn processes, track, export.

Everything runs on localhost. "Devices" are emulation bindings: each client
process gets a device profile and the standard environment contract
(COLEXT_SERVER_ADDRESS, COLEXT_N_CLIENTS, COLEXT_CLIENT_ID,
COLEXT_CLIENT_DEV_TYPE). Job metadata and the metric store live together
under <jobs_root>/<job_id>/ so status and exports survive orchestrator
restarts.
"""

from __future__ import annotations

import json
import math
import os
import secrets
import socket
import subprocess
import sys
import time
import logging
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import psutil

from fedbed import analysis, seeds
from fedbed.config import (
    ENV_CLIENT_DEV_TYPE,
    ENV_CLIENT_ID,
    ENV_N_CLIENTS,
    ENV_SERVER_ADDRESS,
    ConfigError,
    ExperimentConfig,
    substitute_env,
)
from fedbed.data import dirichlet_partition, save_dataset, synth_dataset, train_val_split
from fedbed.emulator import profile_to_dict
from fedbed.metrics import MetricStore, export_csv

logger = logging.getLogger(__name__)

STATE_RUNNING = "running"
STATE_FINISHED = "finished"
STATE_FAILED = "failed"


class UnknownJobError(KeyError):
    pass


class JobStillRunningError(RuntimeError):
    pass


class LaunchError(RuntimeError):
    pass


@dataclass(frozen=True)
class JobId:
    value: str
    created_at: float

    def __str__(self) -> str:
        return self.value


def _new_job_id() -> JobId:
    now = time.time()
    stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
    return JobId(f"job-{stamp}-{secrets.token_hex(3)}", now)


def _free_port(host: str) -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def _build_shards(cfg: ExperimentConfig, job_dir: Path) -> list[dict]:
    ds_cfg = cfg.dataset
    per_class = math.ceil(cfg.n_clients * ds_cfg.samples_per_client / ds_cfg.classes)
    dataset_seed = ds_cfg.seed if ds_cfg.seed is not None else seeds.derive_seed(cfg.seed, seeds.DATASET)
    full = synth_dataset(
        ds_cfg.classes, ds_cfg.dim, per_class, dataset_seed, ds_cfg.mean_scale, ds_cfg.noise_sigma
    )
    plan = cfg.partition_plan()
    shards = dirichlet_partition(full, plan)
    shard_dir = job_dir / "shards"
    shard_dir.mkdir(parents=True)
    entries = []
    for cid, shard in enumerate(shards):
        train, val = train_val_split(shard, plan.val_fraction, seeds.derive_seed(plan.seed, seeds.SPLIT, cid))
        train_rel = f"shards/train_{cid}.bin"
        val_rel = f"shards/val_{cid}.bin"
        save_dataset(job_dir / train_rel, train)
        save_dataset(job_dir / val_rel, val)
        entries.append({"train_shard": train_rel, "val_shard": val_rel})
    return entries


def _roster(cfg: ExperimentConfig) -> list[dict]:
    entries = []
    cid = 0
    for group in cfg.devices:
        profile = cfg.profile_for(group.dev_type)
        for _ in range(group.count):
            entries.append(
                {
                    "client_id": cid,
                    "dev_type": group.dev_type,
                    "width_ratio": cfg.ratio_for(group.dev_type),
                    "profile": profile_to_dict(profile),
                    "power_seed": seeds.derive_seed(cfg.seed, seeds.POWER, cid),
                }
            )
            cid += 1
    return entries


def _base_env() -> dict[str, str]:
    # Strip any stale COLEXT_* so spawned processes see exactly our contract.
    return {k: v for k, v in os.environ.items() if not k.startswith("COLEXT_")}


def _argv_for(entrypoint: str | None, args: list[str], builtin_module: str,
              job_dir: Path, config_dir: Path, env_map: dict[str, str]) -> list[str]:
    if entrypoint is None:
        argv = [sys.executable, "-m", builtin_module]
        args = list(args) + [f"--job-dir={job_dir}"]
    else:
        script = Path(entrypoint)
        if not script.is_absolute():
            script = config_dir / script
        argv = [sys.executable, str(script)]
    return argv + substitute_env(args, env_map)


# Default args for the built-in entrypoints, in the same placeholder style
# experimenters use for their own code.
BUILTIN_CLIENT_ARGS = [
    "--server-addr=${COLEXT_SERVER_ADDRESS}",
    "--client-id=${COLEXT_CLIENT_ID}",
    "--dev-type=${COLEXT_CLIENT_DEV_TYPE}",
]
BUILTIN_SERVER_ARGS = [
    "--listen=${COLEXT_SERVER_ADDRESS}",
    "--n-clients=${COLEXT_N_CLIENTS}",
]


@dataclass
class ManagedProcess:
    role: str
    popen: subprocess.Popen
    log_path: Path
    log_file: object
    exit_code: int | None = None


class JobHandle:
    """A launched job: its directory, child processes, and final state."""

    def __init__(self, job_id: JobId, job_dir: Path, procs: list[ManagedProcess]):
        self.job_id = job_id
        self.job_dir = job_dir
        self.procs = procs
        self.state = STATE_RUNNING

    def poll(self) -> str:
        if self.state != STATE_RUNNING:
            return self.state
        codes = [p.popen.poll() for p in self.procs]
        if any(c not in (None, 0) for c in codes):
            self._finalize(STATE_FAILED)
        elif all(c == 0 for c in codes):
            self._finalize(STATE_FINISHED)
        return self.state

    def wait(self, timeout_s: float | None = None) -> str:
        start = time.monotonic()
        while self.poll() == STATE_RUNNING:
            if timeout_s is not None and time.monotonic() - start > timeout_s:
                logger.error("job %s timed out after %.1fs", self.job_id, timeout_s)
                self._finalize(STATE_FAILED)
                break
            time.sleep(0.05)
        return self.state

    def kill(self) -> None:
        if self.state == STATE_RUNNING:
            self._finalize(STATE_FAILED)

    def _finalize(self, state: str) -> None:
        for p in self.procs:
            if p.popen.poll() is None:
                p.popen.terminate()
        deadline = time.monotonic() + 3.0
        for p in self.procs:
            remaining = max(0.0, deadline - time.monotonic())
            try:
                p.popen.wait(timeout=remaining)
            except subprocess.TimeoutExpired:
                p.popen.kill()
                p.popen.wait()
            p.exit_code = p.popen.returncode
            try:
                p.log_file.close()
            except OSError:
                pass
        self.state = state
        meta_path = self.job_dir / "job.json"
        meta = json.loads(meta_path.read_text())
        meta["state"] = state
        meta["finished_at"] = time.time()
        for entry, p in zip(meta["procs"], self.procs):
            entry["exit_code"] = p.exit_code
        meta_path.write_text(json.dumps(meta, indent=2))


def launch_job(
    cfg: ExperimentConfig,
    jobs_root: str | Path,
    wait: bool = True,
    timeout_s: float | None = None,
) -> JobHandle:
    """Build shards, spawn one server and N clients, and track them.

    With ``wait=True`` (the default) this blocks until the job reaches a
    terminal state. Any spawn failure tears down everything already started.
    """
    # Children run with cwd=job_dir and read paths from job.json, so the
    # job directory must be absolute regardless of how jobs_root was given.
    jobs_root = Path(jobs_root).resolve()
    job_id = _new_job_id()
    while (jobs_root / job_id.value).exists():
        job_id = _new_job_id()
    job_dir = jobs_root / job_id.value
    (job_dir / "logs").mkdir(parents=True)

    shard_entries = _build_shards(cfg, job_dir)
    roster = _roster(cfg)
    for entry, shard in zip(roster, shard_entries):
        entry.update(shard)

    port = cfg.server_port or _free_port(cfg.server_host)
    address = f"{cfg.server_host}:{port}"
    n = cfg.n_clients

    meta = {
        "job_id": job_id.value,
        "created_at": job_id.created_at,
        "t0_epoch": time.time(),
        "time_scale": cfg.time_scale,
        "server_address": address,
        "n_clients": n,
        "seed": cfg.seed,
        "model": {
            "layers": list(cfg.model.layer_widths),
            "activation": cfg.model.activation,
            "name": cfg.model_name,
        },
        "strategy": {
            "algorithm": cfg.strategy.algorithm,
            "fraction_fit": cfg.strategy.fraction_fit,
            "num_rounds": cfg.strategy.num_rounds,
            "target_accuracy": cfg.strategy.target_accuracy,
            "round_deadline_s": cfg.strategy.round_deadline_s,
            "mu": cfg.strategy.mu,
            "seed": cfg.strategy.seed,
        },
        "training": {
            "local_epochs": cfg.training.local_epochs,
            "batch_size": cfg.training.batch_size,
            "learning_rate": cfg.training.learning_rate,
        },
        "monitoring": {
            "scrape_interval_s": cfg.scrape_interval_s,
            "push_interval_s": cfg.push_interval_s,
        },
        "roster": roster,
        "state": STATE_RUNNING,
        "procs": [],
    }

    procs: list[ManagedProcess] = []
    meta_path = job_dir / "job.json"
    # Written before any spawn: children read it at startup.
    meta_path.write_text(json.dumps(meta, indent=2))

    def _spawn(role: str, argv: list[str], env: dict[str, str]) -> None:
        log_path = job_dir / "logs" / f"{role}.log"
        log_file = log_path.open("w")
        try:
            popen = subprocess.Popen(
                argv, env=env, stdout=log_file, stderr=subprocess.STDOUT, cwd=job_dir
            )
        except OSError as exc:
            log_file.close()
            raise LaunchError(f"failed to spawn {role}: {exc}") from exc
        procs.append(ManagedProcess(role, popen, log_path, log_file))
        meta["procs"].append({"role": role, "pid": popen.pid, "log": str(log_path.name), "exit_code": None})

    base_env = _base_env()
    try:
        server_env = dict(base_env)
        server_env[ENV_SERVER_ADDRESS] = address
        server_env[ENV_N_CLIENTS] = str(n)
        server_args = cfg.server_args if cfg.server_entrypoint is not None else (
            cfg.server_args or BUILTIN_SERVER_ARGS
        )
        _spawn(
            "server",
            _argv_for(cfg.server_entrypoint, server_args, "fedbed.server",
                      job_dir, cfg.config_dir, {k: server_env[k] for k in (ENV_SERVER_ADDRESS, ENV_N_CLIENTS)}),
            server_env,
        )

        for entry in roster:
            cid = entry["client_id"]
            env = dict(base_env)
            env[ENV_SERVER_ADDRESS] = address
            env[ENV_N_CLIENTS] = str(n)
            env[ENV_CLIENT_ID] = str(cid)
            env[ENV_CLIENT_DEV_TYPE] = entry["dev_type"]
            env_map = {k: env[k] for k in (ENV_SERVER_ADDRESS, ENV_N_CLIENTS, ENV_CLIENT_ID, ENV_CLIENT_DEV_TYPE)}
            client_args = cfg.client_args if cfg.client_entrypoint is not None else (
                cfg.client_args or BUILTIN_CLIENT_ARGS
            )
            _spawn(
                f"client_{cid}",
                _argv_for(cfg.client_entrypoint, client_args, "fedbed.client",
                          job_dir, cfg.config_dir, env_map),
                env,
            )
    except (LaunchError, ConfigError):
        meta_path.write_text(json.dumps(meta, indent=2))
        handle = JobHandle(job_id, job_dir, procs)
        handle.kill()
        raise

    # Rewritten with the complete pid table so other processes can inspect
    # a running job.
    meta_path.write_text(json.dumps(meta, indent=2))

    handle = JobHandle(job_id, job_dir, procs)
    if wait:
        handle.wait(timeout_s)
    return handle


def _job_dir(job_id: str, jobs_root: str | Path) -> Path:
    job_dir = Path(jobs_root) / str(job_id)
    if not (job_dir / "job.json").exists():
        raise UnknownJobError(f"unknown job id {job_id!r}")
    return job_dir


@dataclass
class ProcessStatus:
    role: str
    pid: int
    exit_code: int | None
    alive: bool


@dataclass
class JobStatus:
    state: str
    procs: list[ProcessStatus]


def job_status(job_id: str, jobs_root: str | Path) -> JobStatus:
    """Live status: recorded outcome reconciled against the process table."""
    meta = json.loads((_job_dir(job_id, jobs_root) / "job.json").read_text())
    procs = []
    any_alive = False
    for entry in meta["procs"]:
        alive = entry["exit_code"] is None and psutil.pid_exists(entry["pid"])
        any_alive = any_alive or alive
        procs.append(ProcessStatus(entry["role"], entry["pid"], entry["exit_code"], alive))
    state = meta["state"]
    if state == STATE_RUNNING and not any_alive:
        # The launcher died without finalizing; treat the job as failed.
        state = STATE_FAILED
    return JobStatus(state, procs)


def get_metrics(job_id: str, jobs_root: str | Path, out_dir: str | Path | None = None) -> dict[str, Path]:
    """Export samples/stage_events/rounds CSVs plus the job summary."""
    job_dir = _job_dir(job_id, jobs_root)
    status = job_status(job_id, jobs_root)
    if status.state == STATE_RUNNING:
        raise JobStillRunningError(f"job {job_id} is still running")
    out = Path(out_dir) if out_dir is not None else job_dir / "metrics_out"
    files = export_csv(MetricStore(job_dir), out)
    rows = [analysis.job_summary(job_dir)]
    files["summary"] = analysis.write_summary_csv(rows, out / "summary.csv")
    files["summary_json"] = analysis.write_summary_json(rows, out / "summary.json")
    return files
