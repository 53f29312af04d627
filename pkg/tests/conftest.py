import threading
import time
from dataclasses import dataclass
from pathlib import Path

import pytest
import yaml

from fedbed.client import FLClient
from fedbed.data import PartitionPlan, dirichlet_partition, synth_dataset, train_val_split
from fedbed.emulator import DeviceProfile, EmulatedClock
from fedbed.metrics import MetricStore
from fedbed.model import ModelSpec, TrainConfig
from fedbed.server import FLServer
from fedbed.strategy import StrategyConfig


@dataclass
class InProcJob:
    """Result of a job run with threads instead of processes."""

    final_params: object
    history: list
    store: MetricStore
    client_exit_codes: dict[int, int]
    job_dir: Path


def run_job_inproc(
    job_dir: Path,
    model: ModelSpec,
    strategy: StrategyConfig,
    train_cfg: TrainConfig,
    profiles: list[DeviceProfile],
    width_ratios: list[float] | None = None,
    time_scale: float = 20.0,
    dataset_kwargs: dict | None = None,
    partition: PartitionPlan | None = None,
    scrape_interval_s: float = 0.05,
    push_interval_s: float = 2.0,
    data_seed: int = 11,
    timeout_s: float = 120.0,
) -> InProcJob:
    """Run one server and len(profiles) clients as threads over real sockets."""
    n = len(profiles)
    ratios = width_ratios or [1.0] * n
    ds_kwargs = {"num_classes": 3, "dim": 8, "per_class": 80, "seed": data_seed}
    ds_kwargs.update(dataset_kwargs or {})
    full = synth_dataset(**ds_kwargs)
    plan = partition or PartitionPlan(n, alpha=None, seed=data_seed, val_fraction=0.2)
    shards = dirichlet_partition(full, plan)

    t0 = time.time()
    store = MetricStore(job_dir)
    server = FLServer(
        strategy, model, train_cfg, n, ("127.0.0.1", 0), EmulatedClock(t0, time_scale), store
    )
    out: dict = {}

    def _serve():
        try:
            out["result"] = server.run()
        except Exception as exc:  # surfaced by the assert below
            out["error"] = exc

    server_thread = threading.Thread(target=_serve, daemon=True)
    server_thread.start()
    deadline = time.monotonic() + 10
    while server.bound_port is None and time.monotonic() < deadline:
        time.sleep(0.005)
    assert server.bound_port is not None, "server did not bind"

    exit_codes: dict[int, int] = {}
    client_threads = []
    for cid, shard in enumerate(shards):
        train, val = train_val_split(shard, plan.val_fraction, data_seed + cid)
        client = FLClient(
            cid,
            ("127.0.0.1", server.bound_port),
            profiles[cid],
            train,
            val,
            model,
            ratios[cid],
            EmulatedClock(t0, time_scale),
            store,
            scrape_interval_s,
            push_interval_s,
            power_seed=1000 + cid,
        )

        def _run(c=client, cid=cid):
            try:
                exit_codes[cid] = c.run()
            except Exception:
                exit_codes[cid] = 1

        client_threads.append(threading.Thread(target=_run, daemon=True))
    for t in client_threads:
        t.start()
    for t in client_threads:
        t.join(timeout_s)
    server_thread.join(timeout_s)
    if "error" in out:
        raise out["error"]
    assert "result" in out, "server did not finish in time"
    final_params, history = out["result"]
    return InProcJob(final_params, history, store, exit_codes, job_dir)


def write_config(path: Path, **overrides) -> Path:
    """Write a small experiment config YAML, mergeable via keyword overrides."""
    base = {
        "seed": 7,
        "devices": [{"dev_type": "XavierNX", "count": 2}],
        "monitoring": {"scrapping_interval": 0.05, "push_to_db_interval": 2},
        "model": {"layers": [8, 3], "activation": "none"},
        "strategy": {"algorithm": "fedavg", "fraction_fit": 1.0, "num_rounds": 2},
        "training": {"local_epochs": 1, "batch_size": 16, "learning_rate": 0.2},
        "dataset": {"classes": 3, "dim": 8, "samples_per_client": 60},
        "emulation": {"time_scale": 10},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key].update(value)
        else:
            base[key] = value
    path.write_text(yaml.safe_dump(base))
    return path


@pytest.fixture
def fast_profile():
    return DeviceProfile("Fast", 2000.0, 2.0, 3.0, 1e8, 1e8, 0.0)


def pytest_runtest_logreport(report):
    # One checklist line per acceptance criterion.
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        verdict = "PASS" if report.passed else "FAIL"
        print(f"\n[acceptance] {name}: {verdict}")
