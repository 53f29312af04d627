"""The FL server process: synchronous round loop over socket clients.

One acceptor collects exactly n_clients registrations, then one reader
thread per connection feeds a single inbox queue. The round loop is the
sole mutator of server state: it samples clients, ships the current global
model (width-sliced per client when the strategy calls for it), blocks for
the sampled fit responses, aggregates, broadcasts an evaluation request to
every client, and records the round.

Round records live on a deterministic protocol timeline: each round
advances it by the slowest sampled client's reported emulated busy time
(download + train + upload) plus the slowest evaluation leg. Wall-clock
progress is always at least that (clients enforce it by throttling), and
the measured wall duration is kept alongside for straggler analysis.
"""

from __future__ import annotations

import argparse
import json
import logging
import queue
import socket
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from fedbed import seeds
from fedbed.emulator import EmulatedClock
from fedbed.metrics import MetricStore
from fedbed.model import ModelSpec, ParamVector, TrainConfig, init_model
from fedbed.strategy import (
    ClientUpdate,
    RoundRecord,
    StrategyConfig,
    aggregate_fedavg,
    aggregate_round_metrics,
    heterofl_aggregate,
    heterofl_extract,
    sample_clients,
    should_stop,
)
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
)

logger = logging.getLogger(__name__)

REGISTRATION_TIMEOUT_S = 120.0


class ServerError(RuntimeError):
    pass


class ClientDisconnected(ServerError):
    pass


class ProtocolViolation(ServerError):
    pass


@dataclass
class ServerState:
    """Connection registry plus round bookkeeping; mutated only by the round loop."""

    connections: dict[int, FramedConnection] = field(default_factory=dict)
    width_ratios: dict[int, float] = field(default_factory=dict)
    dead: set[int] = field(default_factory=set)
    current_round: int = 0
    history: list[RoundRecord] = field(default_factory=list)


class FLServer:
    def __init__(
        self,
        strategy: StrategyConfig,
        model: ModelSpec,
        train_cfg: TrainConfig,
        n_clients: int,
        listen_addr: tuple[str, int],
        clock: EmulatedClock | None = None,
        store: MetricStore | None = None,
    ):
        if n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        self.strategy = strategy
        self.model = model
        self.train_cfg = train_cfg
        self.n_clients = n_clients
        self.listen_addr = listen_addr
        self.clock = clock or EmulatedClock()
        self.store = store
        self.state = ServerState()
        self.inbox: queue.Queue[tuple[int, object]] = queue.Queue()
        self._protocol_t = 0.0  # deterministic round timeline, emulated seconds
        self.bound_port: int | None = None

    # -- registration ------------------------------------------------------

    def _register_clients(self, listener: socket.socket) -> None:
        deadline = time.monotonic() + REGISTRATION_TIMEOUT_S
        while len(self.state.connections) < self.n_clients:
            listener.settimeout(max(0.1, deadline - time.monotonic()))
            try:
                sock, _ = listener.accept()
            except socket.timeout:
                raise ServerError(
                    f"only {len(self.state.connections)}/{self.n_clients} clients "
                    "registered before timeout"
                ) from None
            sock.settimeout(30.0)  # a connected-but-silent peer must not wedge registration
            conn = FramedConnection(sock)
            try:
                msg = conn.recv()
            except socket.timeout:
                conn.close()
                raise ServerError("peer connected but never sent Hello") from None
            sock.settimeout(None)
            if not isinstance(msg, Hello):
                conn.close()
                raise ProtocolViolation(f"expected Hello, got {type(msg).__name__}")
            if not (0 <= msg.client_id < self.n_clients) or msg.client_id in self.state.connections:
                conn.send(ErrorMsg(f"bad client id {msg.client_id}"))
                conn.close()
                raise ProtocolViolation(f"invalid or duplicate client id {msg.client_id}")
            conn.send(HelloAck(msg.client_id))
            self.state.connections[msg.client_id] = conn
            self.state.width_ratios[msg.client_id] = msg.width_ratio
            threading.Thread(
                target=self._reader, args=(msg.client_id, conn), daemon=True,
                name=f"reader-c{msg.client_id}",
            ).start()
        logger.info("all %d clients registered", self.n_clients)

    def _reader(self, client_id: int, conn: FramedConnection) -> None:
        try:
            while True:
                msg = conn.recv()
                self.inbox.put((client_id, msg))
                if msg is None:
                    return
        except Exception as exc:
            logger.debug("reader for client %d stopped: %s", client_id, exc)
            self.inbox.put((client_id, None))

    # -- per-round helpers ---------------------------------------------------

    def _payload_for(self, client_id: int, global_params: ParamVector) -> ParamVector:
        if self.strategy.algorithm == "heterofl":
            return heterofl_extract(global_params, self.model, self.state.width_ratios[client_id])
        return global_params

    def _fit_config(self, round_num: int, client_id: int) -> dict[str, str]:
        mu = self.strategy.mu if self.strategy.algorithm == "fedprox" else 0.0
        return {
            "local_epochs": str(self.train_cfg.local_epochs),
            "batch_size": str(self.train_cfg.batch_size),
            "learning_rate": repr(self.train_cfg.learning_rate),
            "mu": repr(mu),
            "seed": str(seeds.derive_seed(self.strategy.seed, seeds.TRAIN, round_num, client_id)),
        }

    def _collect(self, expected: list[int], round_num: int, want_cls, deadline_s: float | None):
        """Gather one response of ``want_cls`` per expected client.

        Without a deadline any disconnect or protocol violation aborts the
        round. With a deadline, late or missing responses are dropped and
        the on-time subset is returned.
        """
        missing = set(expected)
        got: dict[int, object] = {}
        arrived_at: dict[int, float] = {}
        deadline_wall = (
            None if deadline_s is None else time.monotonic() + deadline_s / self.clock.time_scale
        )
        while missing:
            if deadline_wall is None:
                timeout = None
                if missing & self.state.dead:
                    cid = sorted(missing & self.state.dead)[0]
                    raise ClientDisconnected(f"client {cid} disconnected during round {round_num}")
            else:
                timeout = deadline_wall - time.monotonic()
                if timeout <= 0 or missing <= self.state.dead:
                    break
            try:
                cid, msg = self.inbox.get(timeout=timeout)
            except queue.Empty:
                break  # deadline expired
            if msg is None:
                self.state.dead.add(cid)
                if deadline_wall is None and cid in missing:
                    raise ClientDisconnected(f"client {cid} disconnected during round {round_num}")
                continue
            if not isinstance(msg, want_cls) or getattr(msg, "round", None) != round_num:
                if deadline_s is not None:
                    # Deadline semantics: late responses from an earlier phase
                    # are discarded rather than failing the job.
                    logger.info("dropping out-of-phase %s from client %d", type(msg).__name__, cid)
                    continue
                raise ProtocolViolation(
                    f"round {round_num}: unexpected {type(msg).__name__} from client {cid}"
                )
            got[cid] = msg
            arrived_at[cid] = self.clock.now()
            missing.discard(cid)
        return got, arrived_at

    def _require_all_alive(self, round_num: int) -> None:
        if self.strategy.round_deadline_s is None and self.state.dead:
            raise ClientDisconnected(
                f"client(s) {sorted(self.state.dead)} disconnected (round {round_num})"
            )

    def _run_round(self, round_num: int, global_params: ParamVector) -> tuple[ParamVector, RoundRecord]:
        cfg = self.strategy
        wall_start = self.clock.now()
        self._require_all_alive(round_num)
        ids = sorted(self.state.connections)
        sampled = sample_clients(ids, cfg.fraction_fit, seeds.derive_seed(cfg.seed, seeds.SAMPLING, round_num))

        sent_at: dict[int, float] = {}
        for cid in sampled:
            self.state.connections[cid].send(
                FitRequest(round_num, self._fit_config(round_num, cid), self._payload_for(cid, global_params))
            )
            sent_at[cid] = self.clock.now()
        responses, arrived = self._collect(sampled, round_num, FitResponse, cfg.round_deadline_s)
        if not responses:
            raise ServerError(f"round {round_num}: no fit responses before the deadline")
        dropped = sorted(set(sampled) - set(responses))
        if dropped:
            logger.warning("round %d: dropped late clients %s", round_num, dropped)

        updates = [
            ClientUpdate(
                client_id=cid,
                params=resp.params,
                num_examples=resp.num_examples,
                width_ratio=self.state.width_ratios[cid],
                train_loss=resp.train_loss,
            )
            for cid, resp in responses.items()
        ]
        if cfg.algorithm == "heterofl":
            new_global = heterofl_aggregate(updates, global_params, self.model)
        else:
            new_global = aggregate_fedavg(updates)
        fit_durations = {cid: arrived[cid] - sent_at[cid] for cid in responses}
        self._require_all_alive(round_num)

        eval_sent: dict[int, float] = {}
        live = [cid for cid in ids if cid not in self.state.dead]
        for cid in live:
            self.state.connections[cid].send(EvalRequest(round_num, self._payload_for(cid, new_global)))
            eval_sent[cid] = self.clock.now()
        evals, eval_arrived = self._collect(live, round_num, EvalResponse, cfg.round_deadline_s)
        if not evals:
            raise ServerError(f"round {round_num}: no evaluation responses")
        eval_durations = {cid: eval_arrived[cid] - eval_sent[cid] for cid in evals}

        mean_acc = aggregate_round_metrics(
            [
                ClientUpdate(cid, new_global, max(resp.num_examples, 1), val_accuracy=resp.accuracy)
                for cid, resp in evals.items()
            ]
        )

        # Deterministic protocol time: slowest fit leg plus slowest eval leg.
        if dropped and cfg.round_deadline_s is not None:
            fit_span = cfg.round_deadline_s
        else:
            fit_span = max(resp.busy_s for resp in responses.values())
        eval_span = max(resp.busy_s for resp in evals.values())
        start = self._protocol_t
        self._protocol_t = start + fit_span + eval_span

        record = RoundRecord(
            round=round_num,
            sampled_clients=sampled,
            round_start_s=start,
            round_end_s=self._protocol_t,
            mean_val_accuracy=mean_acc,
            fit_duration_s=fit_durations,
            eval_duration_s=eval_durations,
            measured_duration_s=self.clock.now() - wall_start,
        )
        return new_global, record

    def _drain_until_clients_close(self, timeout_s: float = 10.0) -> None:
        # Stragglers may still be flushing late responses; wait for each
        # client to see Shutdown and close before tearing the sockets down.
        waiting = set(self.state.connections) - self.state.dead
        deadline = time.monotonic() + timeout_s
        while waiting:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                logger.warning("clients %s did not close after Shutdown", sorted(waiting))
                return
            try:
                cid, msg = self.inbox.get(timeout=remaining)
            except queue.Empty:
                continue
            if msg is None:
                waiting.discard(cid)

    # -- lifecycle -----------------------------------------------------------

    def run(self) -> tuple[ParamVector, list[RoundRecord]]:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind(self.listen_addr)
        self.bound_port = listener.getsockname()[1]
        listener.listen(self.n_clients)
        try:
            self._register_clients(listener)
        finally:
            listener.close()

        global_params = init_model(self.model, seeds.derive_seed(self.strategy.seed, seeds.MODEL_INIT))
        try:
            round_num = 0
            while not should_stop(self.state.history, self.strategy):
                round_num += 1
                self.state.current_round = round_num
                global_params, record = self._run_round(round_num, global_params)
                self.state.history.append(record)
                if self.store is not None:
                    self.store.write_round(record)
                logger.info(
                    "round %d: acc=%.4f span=%.3fs sampled=%s",
                    round_num, record.mean_val_accuracy,
                    record.round_end_s - record.round_start_s, record.sampled_clients,
                )
            for cid, conn in sorted(self.state.connections.items()):
                if cid not in self.state.dead:
                    try:
                        conn.send(Shutdown())
                    except OSError:
                        pass
            self._drain_until_clients_close()
        except Exception as exc:
            for cid, conn in sorted(self.state.connections.items()):
                if cid not in self.state.dead:
                    try:
                        conn.send(ErrorMsg(f"job aborted: {exc}"))
                    except OSError:
                        pass
            raise
        finally:
            for conn in self.state.connections.values():
                conn.close()
        return global_params, self.state.history


def server_run(
    strategy: StrategyConfig,
    model: ModelSpec,
    train_cfg: TrainConfig,
    n_clients: int,
    listen_addr: tuple[str, int],
    clock: EmulatedClock | None = None,
    store: MetricStore | None = None,
) -> tuple[ParamVector, list[RoundRecord]]:
    """Run a full job and return the final global model and round history."""
    return FLServer(strategy, model, train_cfg, n_clients, listen_addr, clock, store).run()


def _parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def main(argv: list[str] | None = None) -> int:
    import os

    parser = argparse.ArgumentParser(prog="fedbed-server")
    # Flags override the standard environment contract.
    parser.add_argument("--listen", default=os.environ.get("COLEXT_SERVER_ADDRESS"),
                        help="host:port to bind (default: COLEXT_SERVER_ADDRESS)")
    parser.add_argument("--n-clients", type=int, default=os.environ.get("COLEXT_N_CLIENTS"))
    parser.add_argument("--job-dir", required=True)
    args = parser.parse_args(argv)
    if args.listen is None or args.n_clients is None:
        parser.error("--listen/--n-clients required when COLEXT_* variables are unset")

    logging.basicConfig(level=logging.INFO, format="%(asctime)s server %(levelname)s %(message)s")
    job_dir = Path(args.job_dir)
    meta = json.loads((job_dir / "job.json").read_text())

    strategy = StrategyConfig(**meta["strategy"])
    model = ModelSpec(tuple(meta["model"]["layers"]), meta["model"]["activation"])
    train_cfg = TrainConfig(**meta["training"])
    clock = EmulatedClock(meta["t0_epoch"], meta["time_scale"])
    store = MetricStore(job_dir)

    try:
        final_params, history = server_run(
            strategy, model, train_cfg, args.n_clients, _parse_addr(args.listen), clock, store
        )
    except Exception:
        logger.exception("server failed")
        return 1
    (job_dir / "global_model.bin").write_bytes(final_params.to_bytes())
    logger.info("job finished after %d rounds", len(history))
    return 0


if __name__ == "__main__":
    sys.exit(main())
