"""Acceptance suite: one test per release criterion, at pinned tolerances.

Each test prints a PASS/FAIL line through the conftest report hook, so a
full run reads as a checklist.
"""

import json
import os
import signal
import statistics
import time
from pathlib import Path

import numpy as np
import psutil
import pytest

from conftest import run_job_inproc, write_config
from fedbed import analysis
from fedbed.config import parse_config
from fedbed.data import PartitionPlan, dirichlet_partition, synth_dataset, train_val_split
from fedbed.emulator import DeviceProfile, EmulatedClock, emulated_fit_duration, emulated_tx_duration
from fedbed.metrics import MetricStore, Scraper, StageGroup, associate_rounds, export_csv
from fedbed.model import ModelSpec, ParamVector, TrainConfig, init_model, loss_and_gradient
from fedbed.orchestrator import get_metrics, launch_job
from fedbed.strategy import ClientUpdate, StrategyConfig, aggregate_fedavg, heterofl_aggregate
from fedbed.wire import FitResponse, ProtocolError, decode, encode
from test_orchestrator import ENV_DUMP_CLIENT, all_pids_dead
from test_wire import random_message, sample_messages


def homogeneous(n, sps=100.0, delta=3.0, idle=2.0, up=1e8, down=1e9, sigma=0.0):
    return [DeviceProfile("Homog", sps, idle, delta, up, down, sigma)] * n


def test_c01_end_to_end_convergence(tmp_path):
    """10 client processes on label-skewed blobs reach 90% accuracy in 20 rounds."""
    cfg_path = write_config(
        tmp_path / "exp.yaml",
        seed=17,
        devices=[{"dev_type": "XavierNX", "count": 10}],
        model={"layers": [16, 3], "activation": "none"},
        strategy={"algorithm": "fedavg", "fraction_fit": 1.0, "num_rounds": 20},
        training={"local_epochs": 1, "batch_size": 32, "learning_rate": 0.1},
        dataset={"classes": 3, "dim": 16, "samples_per_client": 250},
        partition={"alpha": 1.0, "val_fraction": 0.2},
        emulation={"time_scale": 10},
        monitoring={"scrapping_interval": 0.3, "push_to_db_interval": 10},
    )
    start = time.monotonic()
    handle = launch_job(parse_config(cfg_path), tmp_path / "jobs", wait=True, timeout_s=120)
    wall = time.monotonic() - start
    assert handle.state == "finished"
    rounds = MetricStore(handle.job_dir).load_rounds()
    assert len(rounds) == 20
    assert rounds[-1].mean_val_accuracy >= 0.90
    assert wall < 60.0, f"job took {wall:.1f}s"


def test_c02_algorithm_reductions(tmp_path):
    """FedProx at mu=0 and HeteroFL at ratio 1.0 collapse to FedAvg exactly."""
    spec = ModelSpec((8, 3), "none")
    train_cfg = TrainConfig(local_epochs=1, batch_size=16, learning_rate=0.2)

    def run(algorithm, where, mu=0.0):
        strategy = StrategyConfig(algorithm=algorithm, fraction_fit=0.5, num_rounds=4, mu=mu, seed=23)
        return run_job_inproc(
            where, spec, strategy, train_cfg, homogeneous(4), time_scale=50.0, data_seed=6
        )

    fedavg = run("fedavg", tmp_path / "a")
    fedprox0 = run("fedprox", tmp_path / "b", mu=0.0)
    assert [r.mean_val_accuracy for r in fedavg.history] == [
        r.mean_val_accuracy for r in fedprox0.history
    ]
    assert fedavg.final_params == fedprox0.final_params

    heterofl = run("heterofl", tmp_path / "c")
    assert [r.mean_val_accuracy for r in fedavg.history] == [
        r.mean_val_accuracy for r in heterofl.history
    ]
    assert fedavg.final_params == heterofl.final_params

    # aggregation-level reduction at the stated tolerance
    rng = np.random.default_rng(0)
    shapes = spec.layer_shapes()
    updates = [
        ClientUpdate(i, ParamVector(rng.normal(size=spec.param_count()).astype(np.float32), shapes),
                     int(rng.integers(1, 20)), width_ratio=1.0)
        for i in range(5)
    ]
    previous = init_model(spec, 0)
    diff = heterofl_aggregate(updates, previous, spec).values - aggregate_fedavg(updates).values
    assert np.abs(diff).max() <= 1e-7


def test_c03_straggler_synchrony(tmp_path):
    """The round lasts as long as the slowest client's emulated fit plus uplink."""
    spec = ModelSpec((8, 3), "none")
    train_cfg = TrainConfig(local_epochs=1, batch_size=16, learning_rate=0.1)
    slow = DeviceProfile("Slow", 10.0, 2.0, 3.0, 2e3, 1e9, 0.0)
    fast = DeviceProfile("Fast", 100.0, 2.0, 3.0, 2e4, 1e9, 0.0)
    profiles = [slow, fast, fast, fast]
    data_seed = 12

    job = run_job_inproc(
        tmp_path, spec, StrategyConfig(num_rounds=3, seed=3), train_cfg, profiles,
        time_scale=12.0, dataset_kwargs={"per_class": 134, "dim": 8, "seed": data_seed},
        partition=PartitionPlan(4, alpha=None, seed=data_seed, val_fraction=0.2),
        data_seed=data_seed,
    )

    # replay the data pipeline to learn each client's training set size
    full = synth_dataset(num_classes=3, dim=8, per_class=134, seed=data_seed)
    plan = PartitionPlan(4, alpha=None, seed=data_seed, val_fraction=0.2)
    shards = dirichlet_partition(full, plan)
    n_train = [
        len(train_val_split(s, plan.val_fraction, data_seed + cid)[0])
        for cid, s in enumerate(shards)
    ]
    params = init_model(spec, 0)

    def fit_plus_uplink(profile, n):
        frame = len(encode(FitResponse(1, n, 0.0, 0.0, params)))
        return emulated_fit_duration(profile, n, 1) + emulated_tx_duration(profile, frame, "up")

    slow_budget = fit_plus_uplink(slow, n_train[0])
    fast_budgets = [fit_plus_uplink(fast, n) for n in n_train[1:]]
    assert slow_budget >= 10 * max(fast_budgets) * 0.9  # the straggler dominates by ~10x

    for record in job.history:
        measured = record.measured_duration_s
        assert measured >= slow_budget * 0.999
        assert measured <= slow_budget * 1.10, (
            f"round {record.round}: {measured:.3f}s vs budget {slow_budget:.3f}s"
        )
        for budget in fast_budgets:
            assert measured >= budget


def test_c04_fraction_fit_trend(tmp_path):
    """More clients per round: time to target never worse, energy never better."""
    spec = ModelSpec((8, 3), "none")
    train_cfg = TrainConfig(local_epochs=1, batch_size=8, learning_rate=0.04)
    target = 0.85
    ttas = {f: [] for f in (0.4, 0.7, 1.0)}
    etas = {f: [] for f in (0.4, 0.7, 1.0)}
    for seed in (1, 2, 3):
        for frac in (0.4, 0.7, 1.0):
            strategy = StrategyConfig(
                algorithm="fedavg", fraction_fit=frac, num_rounds=60,
                target_accuracy=target, seed=seed,
            )
            job = run_job_inproc(
                tmp_path / f"s{seed}_f{int(frac * 10)}", spec, strategy, train_cfg,
                homogeneous(5), time_scale=20.0,
                dataset_kwargs={"per_class": 90, "dim": 8, "mean_scale": 0.8, "seed": 100 + seed},
                partition=PartitionPlan(5, alpha=None, seed=seed, val_fraction=0.2),
            )
            rounds = job.history
            tta = analysis.compute_tta(rounds, target)
            assert tta is not None, f"target never reached (frac={frac}, seed={seed})"
            idle = {c: 2.0 for c in range(5)}
            eta = analysis.compute_eta(
                job.store.load_samples(), job.store.load_stage_events(), rounds, target, idle
            )
            ttas[frac].append(tta)
            etas[frac].append(eta)

    med_tta = [statistics.median(ttas[f]) for f in (0.4, 0.7, 1.0)]
    med_eta = [statistics.median(etas[f]) for f in (0.4, 0.7, 1.0)]
    assert med_tta[0] >= med_tta[1] >= med_tta[2], f"TTA medians not non-increasing: {med_tta}"
    assert med_eta[0] <= med_eta[1] <= med_eta[2], f"ETA medians not non-decreasing: {med_eta}"


def test_c05_energy_arithmetic():
    """Idle subtraction: 5.0 W measured over 2.9 W idle gives 2.1 W and 210 J per 100 s."""
    group = StageGroup(0, 1, "fit", 0.0, 100.0)
    group.samples = [
        analysis.MetricSample(float(t), 0, 0.0, 0, 5.0, 0, 0) for t in range(0, 100, 5)
    ]
    report = analysis.compute_energy([], [group], 2.9, 0)
    assert report.mean_active_power_w == pytest.approx(2.1, abs=1e-9)
    assert report.energy_j == pytest.approx(210.0, abs=1e-9)


def test_c06_emulator_oracle_energy(tmp_path):
    """With zero power noise, measured ETA equals delta_w x active time exactly."""
    spec = ModelSpec((8, 3), "none")
    train_cfg = TrainConfig(local_epochs=1, batch_size=16, learning_rate=0.3)
    profiles = [
        DeviceProfile("A", 60.0, 2.9, 2.1, 1e8, 1e9, 0.0),
        DeviceProfile("B", 80.0, 2.0, 3.0, 1e8, 1e9, 0.0),
        DeviceProfile("C", 50.0, 1.5, 5.5, 1e8, 1e9, 0.0),
    ]
    target = 0.8
    strategy = StrategyConfig(fraction_fit=1.0, num_rounds=6, target_accuracy=target, seed=5)
    job = run_job_inproc(
        tmp_path, spec, strategy, train_cfg, profiles, time_scale=20.0,
        dataset_kwargs={"per_class": 60, "dim": 8, "mean_scale": 3.0},
        scrape_interval_s=0.05,
    )
    samples = job.store.load_samples()
    events = job.store.load_stage_events()
    rounds = job.history
    idle = {cid: profiles[cid].idle_power_w for cid in range(3)}
    eta = analysis.compute_eta(samples, events, rounds, target, idle)
    assert eta is not None

    upto = next(r.round for r in rounds if r.mean_val_accuracy >= target)
    groups, _ = associate_rounds(samples, events)
    truth = 0.0
    for cid in range(3):
        active_time = sum(
            g.duration_s for g in groups if g.client_id == cid and g.round <= upto
        )
        truth += profiles[cid].active_power_delta_w * active_time
    assert eta == pytest.approx(truth, rel=1e-6)


class _PsutilSensors:
    def __init__(self):
        self.proc = psutil.Process()
        self.proc.cpu_percent(None)

    def sample(self, clock):
        return clock.now(), self.proc.cpu_percent(None), self.proc.memory_info().rss, 3.0, 0, 0


def test_c07_scraper_accounting(tmp_path):
    """60 emulated seconds at 0.3 s scrape / 10 s push: 200 +- 2 samples per
    client, batches of 33 +- 2, and export counts reconcile exactly."""
    scale = 25.0
    t0 = time.time()
    store = MetricStore(tmp_path)
    scrapers = []
    writers = []
    for cid in range(2):
        writer = store.writer(cid)
        clock = EmulatedClock(t0, scale)
        scraper = Scraper(clock, cid, 0.3, 10.0, _PsutilSensors(), writer)
        scrapers.append((scraper, clock))
        writers.append(writer)
        scraper.start()
    shared_clock = EmulatedClock(t0, scale)
    while shared_clock.now() < 60.0:
        time.sleep(0.001)
    for scraper, _ in scrapers:
        scraper.stop()
    for writer in writers:
        writer.close()

    samples = store.load_samples()
    for cid in range(2):
        count = sum(1 for s in samples if s.client_id == cid)
        assert abs(count - 200) <= 2, f"client {cid}: {count} samples"
        pushes = store.load_push_log(cid)
        assert sum(n for _, n in pushes) == count  # conservation through batching
        full_batches = [n for _, n in pushes[:-1]]
        assert full_batches, "expected multiple flushes"
        for n in full_batches:
            assert abs(n - 33) <= 2, f"batch of {n}"

    files = export_csv(store, tmp_path / "out")
    exported = len(files["samples"].read_text().splitlines()) - 1
    assert exported == len(samples)


def test_c08_edp_ordering():
    """A device that is faster and leaner per batch has the strictly lowest EDP."""
    bs = 16
    devices = {
        "A": DeviceProfile("A", 100.0, 2.0, 6.0, 1e8, 1e8, 0.0),
        "B": DeviceProfile("B", 200.0, 2.0, 4.0, 1e8, 1e8, 0.0),
        "C": DeviceProfile("C", 50.0, 2.0, 5.0, 1e8, 1e8, 0.0),
    }
    edp = {}
    for name, prof in devices.items():
        n, epochs = 160, 1
        fit_time = emulated_fit_duration(prof, n, epochs)
        group = StageGroup(0, 1, "fit", 0.0, fit_time)
        group.samples = [
            analysis.MetricSample(t, 0, 0.0, 0, prof.idle_power_w + prof.active_power_delta_w, 0, 0)
            for t in np.linspace(0.0, fit_time * 0.99, 9)
        ]
        num_batches = epochs * (n // bs)
        t_b, e_b = analysis.per_batch_stats(group, num_batches, prof.idle_power_w)
        edp[name] = analysis.compute_edp(t_b, e_b)
    # B beats A and C on both per-batch time and energy by construction
    assert edp["B"] < edp["A"] and edp["B"] < edp["C"], edp


def test_c09_determinism(tmp_path):
    """Re-running a config bit-reproduces rounds.csv and the final model."""
    def run(where):
        where.mkdir(parents=True, exist_ok=True)
        cfg = parse_config(
            write_config(
                where / "exp.yaml",
                seed=97,
                devices=[{"dev_type": "OrinNano", "count": 4}],
                strategy={"algorithm": "fedavg", "fraction_fit": 0.5, "num_rounds": 3},
                emulation={"time_scale": 20},
            )
        )
        handle = launch_job(cfg, where / "jobs", wait=True, timeout_s=90)
        assert handle.state == "finished"
        files = get_metrics(handle.job_id.value, where / "jobs", where / "out")
        return files["rounds"].read_bytes(), (handle.job_dir / "global_model.bin").read_bytes()

    rounds_a, model_a = run(tmp_path / "runA")
    rounds_b, model_b = run(tmp_path / "runB")
    assert rounds_a == rounds_b
    assert model_a == model_b


def test_c10_config_env_contract(tmp_path):
    """The reference config parses as specified and spawned clients carry
    exactly the four COLEXT_* variables."""
    from test_config import REFERENCE_CONFIG

    ref = tmp_path / "ref.yaml"
    ref.write_text(REFERENCE_CONFIG)
    cfg = parse_config(ref)
    assert cfg.n_clients == 10
    assert len({g.dev_type for g in cfg.devices}) == 3
    assert (cfg.scrape_interval_s, cfg.push_interval_s) == (pytest.approx(0.3), pytest.approx(10.0))

    stub = tmp_path / "dump_env.py"
    stub.write_text(ENV_DUMP_CLIENT)
    out_prefix = tmp_path / "envdump"
    cfg_path = write_config(
        tmp_path / "exp.yaml",
        devices=[
            {"dev_type": "LattePandaDelta3", "count": 4},
            {"dev_type": "OrangePi5B", "count": 2},
            {"dev_type": "JetsonOrinNano", "count": 4},
        ],
        code={
            "client": {"entrypoint": str(stub), "args": [str(out_prefix)]},
            "server": {"entrypoint": str(stub), "args": [str(out_prefix)]},
        },
    )
    handle = launch_job(parse_config(cfg_path), tmp_path / "jobs", wait=True, timeout_s=60)
    assert handle.state == "finished"
    expected_devs = ["LattePandaDelta3"] * 4 + ["OrangePi5B"] * 2 + ["JetsonOrinNano"] * 4
    for cid in range(10):
        dump = json.loads(Path(f"{out_prefix}_{cid}.json").read_text())
        assert set(dump) == {
            "COLEXT_SERVER_ADDRESS", "COLEXT_N_CLIENTS", "COLEXT_CLIENT_ID", "COLEXT_CLIENT_DEV_TYPE",
        }
        assert dump["COLEXT_CLIENT_ID"] == str(cid)
        assert dump["COLEXT_N_CLIENTS"] == "10"
        assert dump["COLEXT_CLIENT_DEV_TYPE"] == expected_devs[cid]


def test_c11_protocol_robustness(tmp_path):
    """10k fuzzed messages round-trip; malformed frames fail cleanly; a killed
    client fails the job with no orphan processes."""
    rng = np.random.default_rng(4242)
    for _ in range(10_000):
        msg = random_message(rng)
        assert decode(encode(msg)) == msg

    frames = [bytearray(encode(m)) for m in sample_messages()]
    for _ in range(3_000):
        frame = bytearray(frames[int(rng.integers(len(frames)))])
        for _ in range(int(rng.integers(1, 4))):
            frame[int(rng.integers(len(frame)))] = int(rng.integers(256))
        try:
            decode(bytes(frame))
        except ProtocolError:
            pass
    for _ in range(3_000):
        blob = rng.integers(0, 256, size=int(rng.integers(0, 128))).astype(np.uint8).tobytes()
        try:
            decode(blob)
        except ProtocolError:
            pass

    cfg = parse_config(
        write_config(
            tmp_path / "exp.yaml",
            strategy={"num_rounds": 50},
            dataset={"samples_per_client": 400},
            emulation={"time_scale": 1},
        )
    )
    handle = launch_job(cfg, tmp_path / "jobs", wait=False)
    time.sleep(2.0)
    victim = next(p for p in handle.procs if p.role == "client_0")
    os.kill(victim.popen.pid, signal.SIGKILL)
    assert handle.wait(60) == "failed"
    assert all_pids_dead(handle)
    server_log = (handle.job_dir / "logs" / "server.log").read_text()
    assert "disconnected" in server_log


def test_c12_gradient_correctness():
    """Analytic gradients (with proximal term) agree with central differences."""
    rng = np.random.default_rng(77)
    worst = 0.0
    for trial in range(100):
        d = int(rng.integers(2, 5))
        c = int(rng.integers(2, 4))
        widths = (d, int(rng.integers(2, 5)), c) if trial % 2 else (d, c)
        spec = ModelSpec(widths, "relu" if len(widths) > 2 else "none")
        shapes = spec.layer_shapes()
        size = spec.param_count()
        w = rng.normal(0, 0.5, size)
        anchor = rng.normal(0, 0.5, size)
        mu = float(rng.choice([0.0, 0.5, 2.0]))
        n = int(rng.integers(2, 8))
        x = rng.normal(size=(n, d)).astype(np.float32)
        y = rng.integers(0, c, n)

        _, grad = loss_and_gradient(w, shapes, x, y, spec.activation, anchor, mu)
        fd = np.zeros(size)
        h = 1e-6
        for i in range(size):
            up, down = w.copy(), w.copy()
            up[i] += h
            down[i] -= h
            lu, _ = loss_and_gradient(up, shapes, x, y, spec.activation, anchor, mu)
            ld, _ = loss_and_gradient(down, shapes, x, y, spec.activation, anchor, mu)
            fd[i] = (lu - ld) / (2 * h)
        rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(grad), np.linalg.norm(fd), 1e-12)
        worst = max(worst, rel)
    assert worst < 1e-4, f"worst relative error {worst}"
