"""Telemetry collection and storage.

Each client process runs one background scraper that samples its sensors on
a fixed-rate schedule (next tick = previous + interval, so sample counts
are predictable), buffers the samples, and pushes them to the job's store
in batches. The store is an embedded append-only directory of JSON-lines
segments, one set per client, so concurrent processes never contend on a
shared file. Stage events mark fit/eval boundaries and are written
immediately.

Timestamps are emulated seconds everywhere; CSV exports render them at
millisecond precision.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from fedbed.strategy import RoundRecord


class StoreError(RuntimeError):
    pass


class UnpairedStageEventsError(ValueError):
    pass


@dataclass(frozen=True)
class MetricSample:
    ts_s: float
    client_id: int
    cpu_pct: float
    mem_bytes: int
    power_w: float
    net_up_bytes: int
    net_down_bytes: int


@dataclass(frozen=True)
class StageEvent:
    ts_s: float
    client_id: int
    round: int
    kind: str  # fit | eval
    edge: str  # start | end


def emit_stage_event(clock, client_id: int, round_num: int, kind: str, edge: str) -> StageEvent:
    """Timestamp a stage boundary with the local emulated clock."""
    if kind not in ("fit", "eval") or edge not in ("start", "end"):
        raise ValueError(f"bad stage event ({kind!r}, {edge!r})")
    return StageEvent(clock.now(), client_id, round_num, kind, edge)


class MetricStore:
    """Append-only per-job store: sample/stage segments per client plus rounds."""

    def __init__(self, job_dir: str | Path):
        self.root = Path(job_dir) / "store"
        self.root.mkdir(parents=True, exist_ok=True)

    def _samples_path(self, client_id: int) -> Path:
        return self.root / f"samples_c{client_id}.jsonl"

    def _stages_path(self, client_id: int) -> Path:
        return self.root / f"stages_c{client_id}.jsonl"

    def _pushes_path(self, client_id: int) -> Path:
        return self.root / f"pushes_c{client_id}.jsonl"

    def _rounds_path(self) -> Path:
        return self.root / "rounds.jsonl"

    def writer(self, client_id: int) -> "ClientMetricWriter":
        return ClientMetricWriter(self, client_id)

    def write_round(self, record: RoundRecord) -> None:
        row = {
            "round": record.round,
            "sampled_clients": list(record.sampled_clients),
            "round_start_s": record.round_start_s,
            "round_end_s": record.round_end_s,
            "mean_val_accuracy": record.mean_val_accuracy,
            "fit_duration_s": {str(k): v for k, v in record.fit_duration_s.items()},
            "eval_duration_s": {str(k): v for k, v in record.eval_duration_s.items()},
            "measured_duration_s": record.measured_duration_s,
        }
        with self._rounds_path().open("a") as f:
            f.write(json.dumps(row) + "\n")

    def _client_ids(self, pattern: str) -> list[int]:
        ids = []
        for p in self.root.glob(pattern):
            stem = p.name.split("_c", 1)[1].split(".", 1)[0]
            ids.append(int(stem))
        return sorted(ids)

    def load_samples(self) -> list[MetricSample]:
        """All samples, ordered by timestamp (per-client arrival order on ties)."""
        rows: list[MetricSample] = []
        for cid in self._client_ids("samples_c*.jsonl"):
            for line in self._samples_path(cid).read_text().splitlines():
                d = json.loads(line)
                rows.append(MetricSample(**d))
        rows.sort(key=lambda s: s.ts_s)  # stable: preserves per-client order
        return rows

    def load_stage_events(self) -> list[StageEvent]:
        rows: list[StageEvent] = []
        for cid in self._client_ids("stages_c*.jsonl"):
            for line in self._stages_path(cid).read_text().splitlines():
                rows.append(StageEvent(**json.loads(line)))
        rows.sort(key=lambda e: e.ts_s)
        return rows

    def load_push_log(self, client_id: int) -> list[tuple[float, int]]:
        path = self._pushes_path(client_id)
        if not path.exists():
            return []
        out = []
        for line in path.read_text().splitlines():
            d = json.loads(line)
            out.append((d["ts_s"], d["n"]))
        return out

    def load_rounds(self) -> list[RoundRecord]:
        path = self._rounds_path()
        if not path.exists():
            return []
        records = []
        for line in path.read_text().splitlines():
            d = json.loads(line)
            records.append(
                RoundRecord(
                    round=d["round"],
                    sampled_clients=list(d["sampled_clients"]),
                    round_start_s=d["round_start_s"],
                    round_end_s=d["round_end_s"],
                    mean_val_accuracy=d["mean_val_accuracy"],
                    fit_duration_s={int(k): v for k, v in d["fit_duration_s"].items()},
                    eval_duration_s={int(k): v for k, v in d["eval_duration_s"].items()},
                    measured_duration_s=d.get("measured_duration_s", 0.0),
                )
            )
        records.sort(key=lambda r: r.round)
        return records


class ClientMetricWriter:
    """One client's append handle into the store. Not shared across threads."""

    RETRIES = 3

    def __init__(self, store: MetricStore, client_id: int):
        self.client_id = client_id
        self._samples = store._samples_path(client_id).open("a")
        self._stages = store._stages_path(client_id).open("a")
        self._pushes = store._pushes_path(client_id).open("a")

    def push_batch(self, batch: list[MetricSample]) -> None:
        """Durable append of a sample batch; empty batches are a no-op."""
        if not batch:
            return
        lines = "".join(json.dumps(s.__dict__) + "\n" for s in batch)
        push_line = json.dumps({"ts_s": batch[-1].ts_s, "n": len(batch)}) + "\n"
        last_exc = None
        for _ in range(self.RETRIES):
            try:
                self._samples.write(lines)
                self._samples.flush()
                self._pushes.write(push_line)
                self._pushes.flush()
                return
            except OSError as exc:  # pragma: no cover - exercised via fault injection
                last_exc = exc
                time.sleep(0.05)
        raise StoreError(f"client {self.client_id}: push failed after retries") from last_exc

    def write_stage_event(self, ev: StageEvent) -> None:
        self._stages.write(json.dumps(ev.__dict__) + "\n")
        self._stages.flush()

    def close(self) -> None:
        for f in (self._samples, self._stages, self._pushes):
            try:
                f.close()
            except OSError:
                pass


class Scraper(threading.Thread):
    """Fixed-rate background sampler with batched pushes.

    ``sensors`` is any object with a ``sample(clock) -> (ts_s, cpu_pct,
    mem_bytes, power_w, net_up, net_down)`` method; producing the timestamp
    inside the sensor lets implementations keep it consistent with
    stage-dependent readings. Samples are buffered and pushed every
    ``push_interval_s`` emulated seconds and once more at shutdown, so
    nothing is lost. If pushes keep failing the buffer grows without bound
    until shutdown; the final failure is surfaced via ``error``.
    """

    def __init__(self, clock, client_id, scrape_interval_s, push_interval_s, sensors, writer):
        super().__init__(name=f"scraper-c{client_id}", daemon=True)
        if scrape_interval_s <= 0 or push_interval_s <= 0:
            raise ValueError("intervals must be positive")
        self.clock = clock
        self.client_id = client_id
        self.scrape_interval_s = scrape_interval_s
        self.push_interval_s = push_interval_s
        self.sensors = sensors
        self.writer = writer
        self.error: Exception | None = None
        self._stop_event = threading.Event()

    def run(self) -> None:
        buf: list[MetricSample] = []
        next_tick = self.clock.now() + self.scrape_interval_s
        next_push = self.clock.now() + self.push_interval_s
        try:
            while not self._stop_event.is_set():
                now = self.clock.now()
                if now < next_tick:
                    self._stop_event.wait((next_tick - now) / self.clock.time_scale)
                    continue
                ts, cpu, mem, power, up, down = self.sensors.sample(self.clock)
                buf.append(MetricSample(ts, self.client_id, cpu, mem, power, up, down))
                next_tick += self.scrape_interval_s
                if self.clock.now() >= next_push:
                    self._flush(buf)
                    next_push += self.push_interval_s
            self._flush(buf)
        except Exception as exc:  # surfaced to the owner at stop()
            self.error = exc

    def _flush(self, buf: list[MetricSample]) -> None:
        if buf:
            self.writer.push_batch(list(buf))
            buf.clear()

    def stop(self) -> None:
        self._stop_event.set()
        self.join()
        if self.error is not None:
            raise StoreError("scraper failed") from self.error


@dataclass
class StageGroup:
    """Samples that fell inside one (client, round, kind) stage window."""

    client_id: int
    round: int
    kind: str
    start_s: float
    end_s: float
    samples: list[MetricSample] = field(default_factory=list)

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


def stage_windows(stage_events: list[StageEvent]) -> list[StageGroup]:
    """Pair start/end events into windows; unpaired events are an error."""
    by_key: dict[tuple[int, int, str], dict[str, list[float]]] = {}
    for ev in stage_events:
        slot = by_key.setdefault((ev.client_id, ev.round, ev.kind), {"start": [], "end": []})
        slot[ev.edge].append(ev.ts_s)
    offenders = []
    windows: list[StageGroup] = []
    for (cid, rnd, kind), slot in sorted(by_key.items()):
        starts, ends = sorted(slot["start"]), sorted(slot["end"])
        if len(starts) != len(ends) or any(e < s for s, e in zip(starts, ends)):
            offenders.append((cid, rnd, kind))
            continue
        for s, e in zip(starts, ends):
            windows.append(StageGroup(cid, rnd, kind, s, e))
    if offenders:
        raise UnpairedStageEventsError(f"unpaired stage events for {offenders}")
    return windows


def associate_rounds(
    samples: list[MetricSample], stage_events: list[StageEvent]
) -> tuple[list[StageGroup], list[MetricSample]]:
    """Assign each sample to the half-open [start, end) stage window containing it.

    Samples outside every window are returned as idle. Each sample lands in
    exactly one bucket.
    """
    windows = stage_windows(stage_events)
    per_client: dict[int, list[StageGroup]] = {}
    for w in windows:
        per_client.setdefault(w.client_id, []).append(w)
    for ws in per_client.values():
        ws.sort(key=lambda w: w.start_s)

    import bisect

    idle: list[MetricSample] = []
    for s in samples:
        ws = per_client.get(s.client_id, [])
        starts = [w.start_s for w in ws]
        i = bisect.bisect_right(starts, s.ts_s) - 1
        if i >= 0 and s.ts_s < ws[i].end_s:
            ws[i].samples.append(s)
        else:
            idle.append(s)
    return windows, idle


SAMPLES_HEADER = "ts_s,client_id,cpu_pct,mem_bytes,power_w,net_up_bytes,net_down_bytes"
STAGES_HEADER = "ts_s,client_id,round,kind,edge"
ROUNDS_HEADER = "round,start_s,end_s,mean_val_acc,sampled_clients"


def export_csv(store: MetricStore, out_dir: str | Path) -> dict[str, Path]:
    """Write samples.csv, stage_events.csv and rounds.csv; re-export is byte-identical."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    samples_path = out / "samples.csv"
    lines = [SAMPLES_HEADER]
    for s in store.load_samples():
        lines.append(
            f"{s.ts_s:.3f},{s.client_id},{s.cpu_pct:.3f},{s.mem_bytes},"
            f"{s.power_w:.6f},{s.net_up_bytes},{s.net_down_bytes}"
        )
    samples_path.write_text("\n".join(lines) + "\n")

    stages_path = out / "stage_events.csv"
    lines = [STAGES_HEADER]
    for e in store.load_stage_events():
        lines.append(f"{e.ts_s:.3f},{e.client_id},{e.round},{e.kind},{e.edge}")
    stages_path.write_text("\n".join(lines) + "\n")

    rounds_path = out / "rounds.csv"
    lines = [ROUNDS_HEADER]
    for r in store.load_rounds():
        ids = " ".join(str(c) for c in r.sampled_clients)
        lines.append(
            f"{r.round},{r.round_start_s:.3f},{r.round_end_s:.3f},"
            f"{r.mean_val_accuracy:.6f},{ids}"
        )
    rounds_path.write_text("\n".join(lines) + "\n")

    return {"samples": samples_path, "stage_events": stages_path, "rounds": rounds_path}
