"""Post-hoc metrics: energy, time-to-accuracy, energy-to-accuracy, EDP.

Energy follows the idle-subtraction convention: measure the mean power
while the device is in an active (fit or eval) stage, subtract its idle
draw, and multiply the remaining "active power" by the total active time.
With the emulated power sensor at zero noise this recovers the profile's
active_power_delta_w exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedbed.metrics import MetricSample, MetricStore, StageEvent, StageGroup, associate_rounds
from fedbed.strategy import RoundRecord

logger = logging.getLogger(__name__)


class NoActiveSamplesError(ValueError):
    pass


@dataclass
class EnergyReport:
    client_id: int
    idle_power_w: float
    mean_active_power_w: float
    active_time_s: float
    energy_j: float
    clamped: bool = False  # True when measured active power fell below idle


def _pooled_mean_power(groups: list[StageGroup]) -> float:
    powers = [s.power_w for g in groups for s in g.samples]
    if not powers:
        raise NoActiveSamplesError("no samples fell inside any active stage window")
    return float(np.mean(powers))


def measured_idle_power(samples: list[MetricSample], idle: list[MetricSample], client_id: int) -> float:
    """Idle draw estimated from samples outside every stage window."""
    vals = [s.power_w for s in idle if s.client_id == client_id]
    if not vals:
        raise NoActiveSamplesError(f"client {client_id} has no idle samples to measure")
    return float(np.mean(vals))


def compute_energy(
    samples: list[MetricSample],
    stage_groups: list[StageGroup],
    idle_power_w: float,
    client_id: int,
) -> EnergyReport:
    """Energy one client spent in the given active stage windows.

    active power = mean(power during fit/eval) - idle; negative results are
    clamped to zero and flagged. energy = active power * total active time.
    """
    if idle_power_w < 0:
        raise ValueError("idle_power_w must be >= 0")
    mine = [g for g in stage_groups if g.client_id == client_id]
    if not mine:
        raise NoActiveSamplesError(f"client {client_id} has no active stage windows")
    mean_power = _pooled_mean_power(mine)
    active = mean_power - idle_power_w
    clamped = active < 0
    if clamped:
        logger.warning("client %d: active power %.4f W below idle, clamping", client_id, active)
        active = 0.0
    active_time = float(sum(g.duration_s for g in mine))
    return EnergyReport(client_id, idle_power_w, active, active_time, active * active_time, clamped)


def compute_tta(
    rounds: list[RoundRecord], target_accuracy: float | None, job_start_s: float = 0.0
) -> float | None:
    """End time of the first round that reaches the target, relative to job start."""
    if target_accuracy is None:
        return None
    for r in sorted(rounds, key=lambda r: r.round):
        if r.mean_val_accuracy >= target_accuracy:
            return r.round_end_s - job_start_s
    return None


def _target_round(rounds: list[RoundRecord], target_accuracy: float) -> int | None:
    for r in sorted(rounds, key=lambda r: r.round):
        if r.mean_val_accuracy >= target_accuracy:
            return r.round
    return None


def compute_eta(
    samples: list[MetricSample],
    stage_events: list[StageEvent],
    rounds: list[RoundRecord],
    target_accuracy: float | None,
    idle_power_by_client: dict[int, float],
    include_eval: bool = True,
) -> float | None:
    """Total active energy across clients accrued in rounds up to the TTA round.

    ``include_eval=False`` restricts the accounting to fit stages only.
    Returns None when the target was never reached.
    """
    if target_accuracy is None:
        return None
    upto = _target_round(rounds, target_accuracy)
    if upto is None:
        return None
    groups, _ = associate_rounds(samples, stage_events)
    kinds = ("fit", "eval") if include_eval else ("fit",)
    active = [g for g in groups if g.round <= upto and g.kind in kinds]
    total = 0.0
    for cid, idle in sorted(idle_power_by_client.items()):
        mine = [g for g in active if g.client_id == cid]
        if not mine:
            continue
        try:
            report = compute_energy(samples, mine, idle, cid)
        except NoActiveSamplesError:
            # Active windows shorter than the scrape interval are below the
            # sampler's resolution; their energy is treated as zero.
            logger.warning("client %d: active stages too short to sample, counting 0 J", cid)
            continue
        total += report.energy_j
    return total


def compute_edp(time_s: float, energy_j: float) -> float:
    """Energy-delay product: lower is jointly faster and more efficient."""
    if time_s < 0 or energy_j < 0:
        raise ValueError("time and energy must be non-negative")
    return time_s * energy_j


def per_batch_stats(
    round_group: StageGroup, num_batches: int, idle_power_w: float
) -> tuple[float, float]:
    """Fit time and fit energy of one round divided by its batch count."""
    if num_batches < 1:
        raise ValueError("num_batches must be >= 1")
    mean_power = _pooled_mean_power([round_group])
    active = max(0.0, mean_power - idle_power_w)
    time_per_batch = round_group.duration_s / num_batches
    energy_per_batch = active * round_group.duration_s / num_batches
    return time_per_batch, energy_per_batch


SUMMARY_HEADER = "job_id,algorithm,model,fraction_fit,max_val_acc,tta_s,eta_j,edp_js"


@dataclass
class SummaryRow:
    job_id: str
    algorithm: str
    model: str
    fraction_fit: float
    max_val_acc: float | None
    tta_s: float | None
    eta_j: float | None
    edp_js: float | None


def job_summary(job_dir: str | Path) -> SummaryRow:
    """One summary row for a finished job's exported data."""
    job_dir = Path(job_dir)
    meta = json.loads((job_dir / "job.json").read_text())
    store = MetricStore(job_dir)
    rounds = store.load_rounds()
    samples = store.load_samples()
    events = store.load_stage_events()

    target = meta["strategy"].get("target_accuracy")
    idle_by_client = {
        int(entry["client_id"]): float(entry["profile"]["idle_power_w"])
        for entry in meta["roster"]
    }
    max_acc = max((r.mean_val_accuracy for r in rounds), default=None)
    tta = compute_tta(rounds, target)
    eta = None
    if tta is not None:
        try:
            eta = compute_eta(samples, events, rounds, target, idle_by_client)
        except NoActiveSamplesError as exc:
            logger.warning("job %s: cannot compute ETA (%s)", meta["job_id"], exc)
    edp = compute_edp(tta, eta) if (tta is not None and eta is not None) else None
    if target is not None and tta is None:
        logger.warning("job %s: target accuracy never reached", meta["job_id"])
    return SummaryRow(
        job_id=meta["job_id"],
        algorithm=meta["strategy"]["algorithm"],
        model=meta["model"].get("name", ""),
        fraction_fit=float(meta["strategy"]["fraction_fit"]),
        max_val_acc=max_acc,
        tta_s=tta,
        eta_j=eta,
        edp_js=edp,
    )


def summary_table(job_dirs: list[str | Path]) -> list[SummaryRow]:
    """Summary rows for a set of jobs, ordered by job id."""
    rows = [job_summary(d) for d in job_dirs]
    rows.sort(key=lambda r: r.job_id)
    return rows


def _cell(value, fmt: str) -> str:
    return "" if value is None else format(value, fmt)


def write_summary_csv(rows: list[SummaryRow], path: str | Path) -> Path:
    lines = [SUMMARY_HEADER]
    for r in rows:
        lines.append(
            f"{r.job_id},{r.algorithm},{r.model},{r.fraction_fit:.3f},"
            f"{_cell(r.max_val_acc, '.6f')},{_cell(r.tta_s, '.3f')},"
            f"{_cell(r.eta_j, '.6f')},{_cell(r.edp_js, '.6f')}"
        )
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def write_summary_json(rows: list[SummaryRow], path: str | Path) -> Path:
    payload = [
        {
            "job_id": r.job_id,
            "algorithm": r.algorithm,
            "model": r.model,
            "fraction_fit": r.fraction_fit,
            "max_val_acc": r.max_val_acc,
            "tta_s": r.tta_s,
            "eta_j": r.eta_j,
            "edp_js": r.edp_js,
        }
        for r in rows
    ]
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path
