"""Server-side round policy: sampling, aggregation, stopping.

Aggregation sums in float64 in ascending client-id order, so results are
bit-reproducible and independent of update arrival order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fedbed.model import ModelSpec, ParamVector, ShapeMismatchError

ALGORITHMS = ("fedavg", "fedprox", "heterofl")


@dataclass(frozen=True)
class StrategyConfig:
    algorithm: str = "fedavg"
    fraction_fit: float = 1.0
    num_rounds: int = 10
    target_accuracy: float | None = None
    round_deadline_s: float | None = None
    mu: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if not (0.0 < self.fraction_fit <= 1.0):
            raise ValueError("fraction_fit must be in (0, 1]")
        if self.num_rounds < 1:
            raise ValueError("num_rounds must be >= 1")
        if self.target_accuracy is not None and not (0.0 < self.target_accuracy <= 1.0):
            raise ValueError("target_accuracy must be in (0, 1]")
        if self.round_deadline_s is not None and self.round_deadline_s <= 0:
            raise ValueError("round_deadline_s must be positive")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")


@dataclass
class ClientUpdate:
    client_id: int
    params: ParamVector
    num_examples: int
    width_ratio: float = 1.0
    train_loss: float = 0.0
    val_accuracy: float | None = None

    def __post_init__(self):
        if self.num_examples < 1:
            raise ValueError("num_examples must be >= 1")


@dataclass
class RoundRecord:
    """One synchronous round: who trained, how long, and the resulting accuracy.

    round_start_s/round_end_s are on the deterministic protocol timeline
    (accumulated emulated busy time); measured_duration_s is the wall-clock
    duration converted to emulated seconds.
    """

    round: int
    sampled_clients: list[int]
    round_start_s: float
    round_end_s: float
    mean_val_accuracy: float
    fit_duration_s: dict[int, float] = field(default_factory=dict)
    eval_duration_s: dict[int, float] = field(default_factory=dict)
    measured_duration_s: float = 0.0

    def __post_init__(self):
        if self.round_end_s < self.round_start_s:
            raise ValueError("round_end_s must be >= round_start_s")
        if not (0.0 <= self.mean_val_accuracy <= 1.0):
            raise ValueError("mean_val_accuracy must be in [0, 1]")


def sample_clients(all_ids: list[int], fraction_fit: float, round_seed: int) -> list[int]:
    """Uniform sample without replacement of ceil(fraction * K) ids, sorted."""
    if not all_ids:
        raise ValueError("no clients to sample from")
    size = math.ceil(fraction_fit * len(all_ids))
    size = min(max(size, 1), len(all_ids))
    rng = np.random.default_rng(round_seed)
    picked = rng.choice(np.asarray(sorted(all_ids)), size=size, replace=False)
    return sorted(int(c) for c in picked)


def _sorted_updates(updates: list[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise ValueError("cannot aggregate an empty update set")
    return sorted(updates, key=lambda u: u.client_id)


def aggregate_fedavg(updates: list[ClientUpdate]) -> ParamVector:
    """Coordinate-wise sum(n_k * w_k) / sum(n_k)."""
    ordered = _sorted_updates(updates)
    shapes = ordered[0].params.shapes
    acc = np.zeros(len(ordered[0].params), dtype=np.float64)
    weight = np.zeros_like(acc)
    for u in ordered:
        if u.params.shapes != shapes:
            raise ShapeMismatchError(f"client {u.client_id} update has mismatched shapes")
        acc += float(u.num_examples) * u.params.values.astype(np.float64)
        weight += float(u.num_examples)
    return ParamVector((acc / weight).astype(np.float32), shapes)


def extract_index_map(spec: ModelSpec, ratio: float) -> np.ndarray:
    """Flat global indices covered by the width-scaled submodel at ``ratio``.

    The submodel takes the leading units of every hidden layer, i.e. the
    leading rows/cols of adjacent weight matrices and leading bias entries.
    """
    full = spec.layer_shapes(1.0)
    sub = spec.layer_shapes(ratio)
    pieces = []
    offset = 0
    for (rows, cols, blen), (r, c, b) in zip(full, sub):
        w_idx = (np.arange(r)[:, None] * cols + np.arange(c)[None, :]).ravel()
        pieces.append(offset + w_idx)
        offset += rows * cols
        pieces.append(offset + np.arange(b))
        offset += blen
    return np.concatenate(pieces)


def heterofl_extract(global_params: ParamVector, spec: ModelSpec, ratio: float) -> ParamVector:
    """Leading-units slice of the global model for a client at ``ratio``."""
    if global_params.shapes != spec.layer_shapes(1.0):
        raise ShapeMismatchError("global params do not match the full-width spec")
    idx = extract_index_map(spec, ratio)
    return ParamVector(global_params.values[idx], spec.layer_shapes(ratio))


def heterofl_aggregate(
    updates: list[ClientUpdate],
    previous_global: ParamVector,
    spec: ModelSpec,
) -> ParamVector:
    """Per-coordinate n_k-weighted mean over the clients holding that coordinate.

    Coordinates no update covers are carried over from the previous global
    model unchanged.
    """
    ordered = _sorted_updates(updates)
    full_shapes = spec.layer_shapes(1.0)
    if previous_global.shapes != full_shapes:
        raise ShapeMismatchError("previous global does not match the full-width spec")
    acc = np.zeros(len(previous_global), dtype=np.float64)
    weight = np.zeros_like(acc)
    for u in ordered:
        if u.params.shapes != spec.layer_shapes(u.width_ratio):
            raise ShapeMismatchError(
                f"client {u.client_id} update inconsistent with ratio {u.width_ratio}"
            )
        idx = extract_index_map(spec, u.width_ratio)
        acc[idx] += float(u.num_examples) * u.params.values.astype(np.float64)
        weight[idx] += float(u.num_examples)
    covered = weight > 0
    merged = previous_global.values.astype(np.float64)
    merged[covered] = acc[covered] / weight[covered]
    return ParamVector(merged.astype(np.float32), full_shapes)


def aggregate_round_metrics(updates: list[ClientUpdate], weighted: bool = False) -> float:
    """Mean validation accuracy across clients.

    The default is the unweighted per-client mean; ``weighted=True`` weights
    each client by its number of examples instead.
    """
    if not updates:
        raise ValueError("no updates to average")
    missing = [u.client_id for u in updates if u.val_accuracy is None]
    if missing:
        raise ValueError(f"updates missing val_accuracy: clients {missing}")
    if weighted:
        weights = np.array([u.num_examples for u in updates], dtype=np.float64)
        accs = np.array([u.val_accuracy for u in updates], dtype=np.float64)
        return float((weights * accs).sum() / weights.sum())
    return float(np.mean([u.val_accuracy for u in updates]))


def should_stop(history: list[RoundRecord], cfg: StrategyConfig) -> bool:
    """True once the accuracy target is met or the round budget is spent."""
    if history and cfg.target_accuracy is not None:
        if history[-1].mean_val_accuracy >= cfg.target_accuracy:
            return True
    return len(history) >= cfg.num_rounds
