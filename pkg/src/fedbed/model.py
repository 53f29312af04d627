"""Dense classification models: init, evaluation, and local SGD training.

Models are softmax regression or one-hidden-layer style MLPs described by a
list of layer widths. Parameters live in a flat float32 vector with
per-layer shape metadata; all arithmetic upcasts to float64 internally so
results are reproducible and gradient checks are tight.

Width-scaled submodels (for capacity-proportional training) keep the input
and output dimensions fixed and shrink every hidden width to
ceil(ratio * width).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "none")

# Tolerates float32 round-off in width ratios without changing exact cases.
_CEIL_EPS = 1e-6


class ShapeMismatchError(ValueError):
    """Parameter/layout shapes disagree with what an operation expects."""


class TrainingDivergedError(RuntimeError):
    """A non-finite loss appeared during local training."""


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: widths, hidden activation, width scaling."""

    layer_widths: tuple[int, ...]
    activation: str = "relu"
    width_ratio: float = 1.0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (0.0 < self.width_ratio <= 1.0):
            raise ValueError(f"width_ratio must be in (0, 1], got {self.width_ratio}")

    def scaled_widths(self, ratio: float | None = None) -> tuple[int, ...]:
        """Widths with hidden layers shrunk to ceil(ratio * width), never below 1."""
        r = self.width_ratio if ratio is None else ratio
        if not (0.0 < r <= 1.0):
            raise ValueError(f"width ratio must be in (0, 1], got {r}")
        ws = list(self.layer_widths)
        for i in range(1, len(ws) - 1):
            ws[i] = max(1, math.ceil(r * ws[i] - _CEIL_EPS))
        return tuple(ws)

    def layer_shapes(self, ratio: float | None = None) -> list[tuple[int, int, int]]:
        """Per-layer (rows, cols, bias length) for the scaled model."""
        ws = self.scaled_widths(ratio)
        return [(ws[i], ws[i + 1], ws[i + 1]) for i in range(len(ws) - 1)]

    def param_count(self, ratio: float | None = None) -> int:
        return sum(r * c + b for r, c, b in self.layer_shapes(ratio))


@dataclass(eq=False)
class ParamVector:
    """Flat float32 parameter vector plus per-layer shape metadata."""

    values: np.ndarray
    shapes: list[tuple[int, int, int]]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32).ravel()
        self.shapes = [tuple(int(x) for x in s) for s in self.shapes]
        expected = sum(r * c + b for r, c, b in self.shapes)
        if expected != self.values.size:
            raise ShapeMismatchError(
                f"shapes describe {expected} values but vector has {self.values.size}"
            )
        if not np.isfinite(self.values).all():
            raise ValueError("parameter vector contains non-finite values")

    def __len__(self) -> int:
        return int(self.values.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.shapes == other.shapes and np.array_equal(self.values, other.values)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), list(self.shapes))

    def to_bytes(self) -> bytes:
        """Binary encoding: u32 layer count, u32 shape triplets, f32 values (LE)."""
        head = struct.pack("<I", len(self.shapes))
        head += b"".join(struct.pack("<III", *s) for s in self.shapes)
        return head + self.values.astype("<f4", copy=False).tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["ParamVector", int]:
        """Decode from ``buf`` starting at ``offset``; returns (vector, end offset)."""
        if len(buf) - offset < 4:
            raise ValueError("truncated parameter header")
        (n_layers,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if n_layers > 4096:
            raise ValueError(f"implausible layer count {n_layers}")
        if len(buf) - offset < 12 * n_layers:
            raise ValueError("truncated shape table")
        shapes = []
        for _ in range(n_layers):
            shapes.append(struct.unpack_from("<III", buf, offset))
            offset += 12
        count = sum(r * c + b for r, c, b in shapes)
        nbytes = 4 * count
        if len(buf) - offset < nbytes:
            raise ValueError("truncated value block")
        values = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
        offset += nbytes
        return cls(values.copy(), shapes), offset


@dataclass
class Dataset:
    """Feature matrix with integer class labels in [0, num_classes)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d matrix")
        if self.features.shape[0] != self.labels.size:
            raise ValueError("features and labels length mismatch")
        if self.features.shape[0] < 1:
            raise ValueError("dataset must be non-empty")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return int(self.labels.size)


@dataclass(frozen=True)
class TrainConfig:
    """Local training knobs; mu > 0 adds the proximal pull toward the global model."""

    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.1
    mu: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")


def _split_layers(flat: np.ndarray, shapes) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views of (weight matrix, bias) per layer over a flat vector."""
    parts = []
    off = 0
    for rows, cols, blen in shapes:
        w = flat[off : off + rows * cols].reshape(rows, cols)
        off += rows * cols
        b = flat[off : off + blen]
        off += blen
        parts.append((w, b))
    return parts


def _forward(flat64: np.ndarray, shapes, activation: str, x: np.ndarray):
    """Forward pass; returns (logits, activations per layer, pre-activations)."""
    layers = _split_layers(flat64, shapes)
    acts = [x]
    pres = []
    for i, (w, b) in enumerate(layers):
        z = acts[-1] @ w + b
        pres.append(z)
        if i < len(layers) - 1:
            acts.append(np.maximum(z, 0.0) if activation == "relu" else z)
    return pres[-1], acts, pres


def _ce_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and softmax probabilities, numerically stable."""
    zmax = logits.max(axis=1, keepdims=True)
    stabilized = logits - zmax
    lse = np.log(np.exp(stabilized).sum(axis=1)) + zmax[:, 0]
    n = logits.shape[0]
    loss = float((lse - logits[np.arange(n), labels]).mean())
    probs = np.exp(logits - lse[:, None])
    return loss, probs


def loss_and_gradient(
    flat: np.ndarray,
    shapes,
    features: np.ndarray,
    labels: np.ndarray,
    activation: str = "relu",
    anchor: np.ndarray | None = None,
    mu: float = 0.0,
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy (plus optional proximal term) and its full gradient.

    The proximal term is (mu/2) * ||w - anchor||^2; its gradient
    mu * (w - anchor) is added coordinate-wise. Everything is float64.
    """
    flat64 = np.asarray(flat, dtype=np.float64)
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    logits, acts, pres = _forward(flat64, shapes, activation, x)
    loss, probs = _ce_loss(logits, y)

    n = x.shape[0]
    delta = probs
    delta[np.arange(n), y] -= 1.0
    delta /= n

    grad = np.zeros_like(flat64)
    grad_views = _split_layers(grad, shapes)
    weight_views = _split_layers(flat64, shapes)
    for i in range(len(shapes) - 1, -1, -1):
        gw, gb = grad_views[i]
        gw[...] = acts[i].T @ delta
        gb[...] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ weight_views[i][0].T
            if activation == "relu":
                delta = delta * (pres[i - 1] > 0.0)

    if mu:
        if anchor is None:
            raise ValueError("mu > 0 requires an anchor vector")
        diff = flat64 - np.asarray(anchor, dtype=np.float64)
        loss += 0.5 * mu * float(diff @ diff)
        grad += mu * diff
    return loss, grad


def init_model(spec: ModelSpec, seed: int) -> ParamVector:
    """Seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init per layer (weights and bias)."""
    rng = np.random.default_rng(seed)
    shapes = spec.layer_shapes()
    chunks = []
    for rows, cols, blen in shapes:
        bound = 1.0 / math.sqrt(rows)
        chunks.append(rng.uniform(-bound, bound, rows * cols + blen))
    return ParamVector(np.concatenate(chunks).astype(np.float32), shapes)


def _check_compat(params: ParamVector, spec: ModelSpec, data: Dataset) -> list:
    shapes = spec.layer_shapes()
    if params.shapes != shapes:
        raise ShapeMismatchError(f"params shaped {params.shapes}, spec expects {shapes}")
    if data.features.shape[1] != shapes[0][0]:
        raise ShapeMismatchError(
            f"features have dim {data.features.shape[1]}, model input is {shapes[0][0]}"
        )
    if data.labels.max() >= shapes[-1][1]:
        raise ShapeMismatchError("labels exceed model output width")
    return shapes


def evaluate(params: ParamVector, spec: ModelSpec, data: Dataset) -> tuple[float, float]:
    """Mean cross-entropy loss and accuracy of ``params`` on ``data``."""
    shapes = _check_compat(params, spec, data)
    flat64 = params.values.astype(np.float64)
    logits, _, _ = _forward(flat64, shapes, spec.activation, data.features.astype(np.float64))
    loss, _ = _ce_loss(logits, data.labels)
    accuracy = float((logits.argmax(axis=1) == data.labels).mean())
    return loss, accuracy


def local_train(
    global_params: ParamVector,
    spec: ModelSpec,
    data: Dataset,
    cfg: TrainConfig,
) -> tuple[ParamVector, int, float]:
    """Mini-batch SGD for ``cfg.local_epochs`` epochs starting from the global model.

    The objective is mean cross-entropy plus, when cfg.mu > 0, the proximal
    penalty (mu/2) * ||w - w_global||^2. Shuffle order is seeded, final
    partial batches are trained, and the reported loss is the mean batch
    loss of the last epoch.
    """
    shapes = _check_compat(global_params, spec, data)
    w = global_params.values.astype(np.float64)
    anchor = w.copy() if cfg.mu else None
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    last_epoch_losses: list[float] = []
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        last_epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grad = loss_and_gradient(
                w, shapes, data.features[idx], data.labels[idx], spec.activation, anchor, cfg.mu
            )
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss {loss} during local training")
            w = w - cfg.learning_rate * grad
            last_epoch_losses.append(loss)
    trained = ParamVector(w.astype(np.float32), shapes)
    return trained, n, float(np.mean(last_epoch_losses))


def proximal_penalty(w: ParamVector, w_global: ParamVector, mu: float) -> float:
    """(mu/2) * squared L2 distance between two parameter vectors."""
    if len(w) != len(w_global):
        raise ShapeMismatchError(f"length mismatch: {len(w)} vs {len(w_global)}")
    diff = w.values.astype(np.float64) - w_global.values.astype(np.float64)
    return 0.5 * mu * float(diff @ diff)
