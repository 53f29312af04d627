"""Synthetic datasets, label-skew partitioning, and shard files.

Partitioning uses the common label-skew construction: for every class, a
proportion vector over clients is drawn from Dirichlet(alpha, ..., alpha)
and sample counts are rounded with a largest-remainder correction so the
split is an exact cover. alpha=None means IID (global shuffle, near-equal
chunks).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedbed.model import Dataset


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class PartitionPlan:
    """How to split one dataset across clients. alpha=None selects IID."""

    num_clients: int
    alpha: float | None = 1.0
    seed: int = 0
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be > 0 (or None for IID)")
        if not (0.0 < self.val_fraction < 1.0):
            raise ValueError("val_fraction must be in (0, 1)")


def synth_dataset(
    num_classes: int,
    dim: int,
    per_class: int,
    seed: int,
    mean_scale: float = 3.0,
    noise_sigma: float = 1.0,
) -> Dataset:
    """Gaussian class blobs: seeded class means, unit-ish noise around them.

    Larger mean_scale spreads the class centroids further apart, making the
    task linearly separable; smaller values make it genuinely hard.
    """
    if num_classes < 1 or dim < 1 or per_class < 1:
        raise ValueError("num_classes, dim and per_class must all be positive")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, mean_scale, size=(num_classes, dim))
    feats = []
    labels = []
    for c in range(num_classes):
        feats.append(means[c] + rng.normal(0.0, noise_sigma, size=(per_class, dim)))
        labels.append(np.full(per_class, c, dtype=np.int64))
    return Dataset(np.concatenate(feats).astype(np.float32), np.concatenate(labels), num_classes)


def _largest_remainder_counts(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing exactly to ``total``, proportional to ``proportions``."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # Stable ordering keeps the result deterministic under ties.
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(data: Dataset, plan: PartitionPlan) -> list[Dataset]:
    """Split ``data`` into ``plan.num_clients`` datasets (exact cover, no empty client)."""
    n, k = len(data), plan.num_clients
    if n < k:
        raise PartitionError(f"cannot give {k} clients at least one of {n} samples")
    rng = np.random.default_rng(plan.seed)
    assigned: list[list[np.ndarray]] = [[] for _ in range(k)]

    if plan.alpha is None:
        order = rng.permutation(n)
        sizes = np.full(k, n // k, dtype=np.int64)
        sizes[: n % k] += 1
        off = 0
        for cid in range(k):
            assigned[cid].append(order[off : off + sizes[cid]])
            off += sizes[cid]
    else:
        for c in range(data.num_classes):
            idx_c = np.flatnonzero(data.labels == c)
            if idx_c.size == 0:
                continue
            idx_c = rng.permutation(idx_c)
            props = rng.dirichlet(np.full(k, plan.alpha))
            counts = _largest_remainder_counts(props, idx_c.size)
            off = 0
            for cid in range(k):
                assigned[cid].append(idx_c[off : off + counts[cid]])
                off += counts[cid]

    parts = [np.concatenate(a) if a else np.empty(0, dtype=np.int64) for a in assigned]

    # A very skewed draw can leave a client empty; steal one sample from the
    # largest client so the configured roster size is preserved.
    sizes = np.array([p.size for p in parts])
    while (sizes == 0).any():
        empty = int(np.argmin(sizes))
        donor = int(np.argmax(sizes))
        parts[empty] = parts[donor][-1:]
        parts[donor] = parts[donor][:-1]
        sizes = np.array([p.size for p in parts])

    return [
        Dataset(data.features[p], data.labels[p], data.num_classes) for p in parts
    ]


def train_val_split(data: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint seeded split; raises if either side would be empty."""
    n = len(data)
    n_val = int(round(n * val_fraction))
    if n_val < 1 or n - n_val < 1:
        raise PartitionError(
            f"val_fraction {val_fraction} leaves an empty side for {n} samples"
        )
    order = np.random.default_rng(seed).permutation(n)
    val_idx, train_idx = order[:n_val], order[n_val:]
    return (
        Dataset(data.features[train_idx], data.labels[train_idx], data.num_classes),
        Dataset(data.features[val_idx], data.labels[val_idx], data.num_classes),
    )


# Shard file layout: u32 n, u32 dim, u32 classes (LE), then row-major f32
# features, then u16 labels. Lets orchestrated client processes load their
# shard by id without re-running the partitioner.

def save_dataset(path: str | Path, data: Dataset) -> None:
    if data.num_classes > 0xFFFF:
        raise ValueError("shard format stores labels as u16")
    n, d = data.features.shape
    blob = struct.pack("<III", n, d, data.num_classes)
    blob += data.features.astype("<f4", copy=False).tobytes()
    blob += data.labels.astype("<u2").tobytes()
    Path(path).write_bytes(blob)


def load_dataset(path: str | Path) -> Dataset:
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise ValueError(f"{path}: truncated shard header")
    n, d, c = struct.unpack_from("<III", blob, 0)
    need = 12 + 4 * n * d + 2 * n
    if len(blob) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(blob)}")
    feats = np.frombuffer(blob, dtype="<f4", count=n * d, offset=12).reshape(n, d)
    labels = np.frombuffer(blob, dtype="<u2", count=n, offset=12 + 4 * n * d)
    return Dataset(feats.copy(), labels.astype(np.int64), c)
