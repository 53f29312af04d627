"""The FL client process: serves fit/eval requests under device emulation.

Training runs on the network loop's thread; a background scraper samples
telemetry concurrently. Each parameter transfer is preceded by a sleep for
the emulated link, and each fit is padded out to the emulated compute time,
so a fast desk machine behaves like the configured device fleet. Stage
markers bracket fit/eval work (including the padding sleep) and drive both
the power model and the later round association.
"""

from __future__ import annotations

import argparse
import json
import logging
import socket
import sys
import threading
import time
from pathlib import Path

import numpy as np
import psutil

from fedbed.data import load_dataset
from fedbed.emulator import (
    DeviceProfile,
    EmulatedClock,
    emulated_fit_duration,
    emulated_tx_duration,
    power_sample,
    profile_from_dict,
    throttle,
)
from fedbed.metrics import ClientMetricWriter, MetricStore, Scraper, emit_stage_event
from fedbed.model import Dataset, ModelSpec, TrainConfig, evaluate, local_train
from fedbed.wire import (
    ErrorMsg,
    EvalRequest,
    EvalResponse,
    FitRequest,
    FitResponse,
    FramedConnection,
    Hello,
    HelloAck,
    Shutdown,
    encode,
)

logger = logging.getLogger(__name__)

CONNECT_ATTEMPTS = 100
CONNECT_BACKOFF_S = 0.1


class ClientError(RuntimeError):
    pass


class StageState:
    """Current stage shared between the request loop and the scraper.

    The lock makes a sampled (timestamp, stage) pair consistent with the
    stage-event timestamps, so a sample can never carry idle power while
    its timestamp falls inside an active window.
    """

    def __init__(self):
        self.lock = threading.Lock()
        self.stage = "idle"
        self.round = 0


class StageTracker:
    def __init__(self, clock, client_id: int, writer: ClientMetricWriter, state: StageState):
        self.clock = clock
        self.client_id = client_id
        self.writer = writer
        self.state = state

    def start(self, kind: str, round_num: int) -> None:
        with self.state.lock:
            ev = emit_stage_event(self.clock, self.client_id, round_num, kind, "start")
            self.state.stage = kind
            self.state.round = round_num
        self.writer.write_stage_event(ev)

    def end(self, kind: str, round_num: int) -> None:
        with self.state.lock:
            ev = emit_stage_event(self.clock, self.client_id, round_num, kind, "end")
            self.state.stage = "idle"
        self.writer.write_stage_event(ev)


class ClientSensors:
    """Real process metrics plus the emulated power signal."""

    def __init__(self, profile: DeviceProfile, state: StageState, conn: FramedConnection,
                 power_seed: int):
        self.profile = profile
        self.state = state
        self.conn = conn
        self.rng = np.random.default_rng(power_seed)
        self.proc = psutil.Process()
        self.proc.cpu_percent(None)  # prime the delta-based counter

    def sample(self, clock):
        # Timestamp and stage-dependent power are read under the stage lock
        # so a sample can never carry idle power inside an active window.
        with self.state.lock:
            ts = clock.now()
            power = power_sample(self.profile, self.state.stage, self.rng)
        try:
            cpu = self.proc.cpu_percent(None)
            mem = self.proc.memory_info().rss
        except psutil.Error:  # platform counters unavailable; zero-fill
            cpu, mem = 0.0, 0
        return ts, cpu, mem, power, self.conn.bytes_sent, self.conn.bytes_received


class FLClient:
    def __init__(
        self,
        client_id: int,
        server_addr: tuple[str, int],
        profile: DeviceProfile,
        train_data: Dataset,
        val_data: Dataset,
        model: ModelSpec,
        width_ratio: float,
        clock: EmulatedClock,
        store: MetricStore,
        scrape_interval_s: float = 0.3,
        push_interval_s: float = 10.0,
        power_seed: int = 0,
    ):
        self.client_id = client_id
        self.server_addr = server_addr
        self.profile = profile
        self.train_data = train_data
        self.val_data = val_data
        # The client trains the width-scaled submodel matching its capacity.
        self.spec = ModelSpec(model.layer_widths, model.activation, width_ratio)
        self.width_ratio = width_ratio
        self.clock = clock
        self.store = store
        self.scrape_interval_s = scrape_interval_s
        self.push_interval_s = push_interval_s
        self.power_seed = power_seed

    def _connect(self) -> FramedConnection:
        last = None
        for _ in range(CONNECT_ATTEMPTS):
            try:
                sock = socket.create_connection(self.server_addr, timeout=10.0)
                sock.settimeout(None)
                return FramedConnection(sock)
            except OSError as exc:
                last = exc
                time.sleep(CONNECT_BACKOFF_S)
        raise ClientError(f"cannot reach server at {self.server_addr}: {last}")

    def _handle_fit(self, conn: FramedConnection, tracker: StageTracker, msg: FitRequest) -> None:
        down_s = emulated_tx_duration(self.profile, conn.last_frame_bytes, "down")
        self.clock.sleep_emulated(down_s)
        cfg = TrainConfig(
            local_epochs=int(msg.config["local_epochs"]),
            batch_size=int(msg.config["batch_size"]),
            learning_rate=float(msg.config["learning_rate"]),
            mu=float(msg.config["mu"]),
            seed=int(msg.config["seed"]),
        )
        tracker.start("fit", msg.round)
        t0 = time.perf_counter()
        params, n, train_loss = local_train(msg.params, self.spec, self.train_data, cfg)
        fit_s = emulated_fit_duration(self.profile, n, cfg.local_epochs)
        throttle(time.perf_counter() - t0, fit_s, self.clock.time_scale)
        tracker.end("fit", msg.round)

        # busy_s is fixed-width on the wire, so sizing the frame with a
        # placeholder value is exact.
        resp = FitResponse(msg.round, n, train_loss, 0.0, params)
        up_s = emulated_tx_duration(self.profile, len(encode(resp)), "up")
        resp.busy_s = down_s + fit_s + up_s
        self.clock.sleep_emulated(up_s)
        conn.send(resp)

    def _handle_eval(self, conn: FramedConnection, tracker: StageTracker, msg: EvalRequest) -> None:
        down_s = emulated_tx_duration(self.profile, conn.last_frame_bytes, "down")
        self.clock.sleep_emulated(down_s)
        tracker.start("eval", msg.round)
        loss, acc = evaluate(msg.params, self.spec, self.val_data)
        tracker.end("eval", msg.round)
        resp = EvalResponse(msg.round, len(self.val_data), loss, acc, 0.0)
        up_s = emulated_tx_duration(self.profile, len(encode(resp)), "up")
        resp.busy_s = down_s + up_s
        self.clock.sleep_emulated(up_s)
        conn.send(resp)

    def run(self) -> int:
        conn = self._connect()
        writer = self.store.writer(self.client_id)
        state = StageState()
        tracker = StageTracker(self.clock, self.client_id, writer, state)
        sensors = ClientSensors(self.profile, state, conn, self.power_seed)
        scraper = Scraper(
            self.clock, self.client_id, self.scrape_interval_s, self.push_interval_s,
            sensors, writer,
        )
        scraper.start()
        status = 0
        try:
            conn.send(Hello(self.client_id, self.width_ratio))
            ack = conn.recv()
            if not isinstance(ack, HelloAck):
                raise ClientError(f"expected HelloAck, got {type(ack).__name__}")
            while True:
                msg = conn.recv()
                if msg is None:
                    raise ClientError("server closed the connection without Shutdown")
                if isinstance(msg, Shutdown):
                    break
                if isinstance(msg, ErrorMsg):
                    logger.error("server error: %s", msg.message)
                    status = 1
                    break
                if isinstance(msg, FitRequest):
                    self._handle_fit(conn, tracker, msg)
                elif isinstance(msg, EvalRequest):
                    self._handle_eval(conn, tracker, msg)
                else:
                    raise ClientError(f"unexpected {type(msg).__name__} from server")
        finally:
            scraper.stop()
            writer.close()
            conn.close()
        return status


def client_run(
    server_addr: tuple[str, int],
    client_id: int,
    profile: DeviceProfile,
    train_data: Dataset,
    val_data: Dataset,
    model: ModelSpec,
    job_dir: str | Path = ".",
    width_ratio: float = 1.0,
    clock: EmulatedClock | None = None,
    **kwargs,
) -> int:
    """Serve one job as the given client; returns the process exit status."""
    client = FLClient(
        client_id, server_addr, profile, train_data, val_data, model,
        width_ratio, clock or EmulatedClock(), MetricStore(job_dir), **kwargs,
    )
    return client.run()


def _parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def main(argv: list[str] | None = None) -> int:
    import os

    parser = argparse.ArgumentParser(prog="fedbed-client")
    # Flags override the standard environment contract.
    parser.add_argument("--server-addr", default=os.environ.get("COLEXT_SERVER_ADDRESS"))
    parser.add_argument("--client-id", type=int, default=os.environ.get("COLEXT_CLIENT_ID"))
    parser.add_argument("--dev-type", default=os.environ.get("COLEXT_CLIENT_DEV_TYPE"))
    parser.add_argument("--job-dir", required=True)
    args = parser.parse_args(argv)
    if args.server_addr is None or args.client_id is None:
        parser.error("--server-addr/--client-id required when COLEXT_* variables are unset")

    logging.basicConfig(
        level=logging.INFO, format=f"%(asctime)s client-{args.client_id} %(levelname)s %(message)s"
    )
    job_dir = Path(args.job_dir)
    meta = json.loads((job_dir / "job.json").read_text())
    entry = next(e for e in meta["roster"] if e["client_id"] == args.client_id)

    profile = profile_from_dict(entry["profile"])
    model = ModelSpec(tuple(meta["model"]["layers"]), meta["model"]["activation"])
    clock = EmulatedClock(meta["t0_epoch"], meta["time_scale"])
    client = FLClient(
        client_id=args.client_id,
        server_addr=_parse_addr(args.server_addr),
        profile=profile,
        train_data=load_dataset(job_dir / entry["train_shard"]),
        val_data=load_dataset(job_dir / entry["val_shard"]),
        model=model,
        width_ratio=float(entry["width_ratio"]),
        clock=clock,
        store=MetricStore(job_dir),
        scrape_interval_s=meta["monitoring"]["scrape_interval_s"],
        push_interval_s=meta["monitoring"]["push_interval_s"],
        power_seed=entry["power_seed"],
    )
    try:
        return client.run()
    except Exception:
        logger.exception("client %d failed", args.client_id)
        return 1


if __name__ == "__main__":
    sys.exit(main())
