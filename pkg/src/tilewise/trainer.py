"""Small MLP with manual backpropagation on synthetic data.

Supplies real loss gradients for importance scoring and the masked
fine-tuning step of the staged pruning loop. Training math runs in float64
so finite-difference checks are not drowned by rounding; weights cross into
the float32 engine world only at the interfaces (checkpoints, inference).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .engine import gemm_tw
from .matrix import DenseMatrix, DimensionError, FormatError, dense_from_bytes, dense_to_bytes
from .pattern import TilePattern, compact

MAGIC_MODEL = b"TWML"
MODEL_VERSION = 1

DEFAULT_LAYER_SIZES = (64, 256, 256, 8)


class DivergenceError(RuntimeError):
    """Training loss became NaN."""


@dataclass
class MlpModel:
    """ReLU MLP with softmax cross-entropy loss; weights float64."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or b.size != w.shape[1]:
                raise DimensionError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
        for wa, wb in zip(self.weights, self.weights[1:]):
            if wa.shape[1] != wb.shape[0]:
                raise DimensionError("layer widths do not chain")

    @classmethod
    def init(cls, sizes: Sequence[int] = DEFAULT_LAYER_SIZES, seed: int = 42) -> "MlpModel":
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes, sizes[1:]):
            weights.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)


@dataclass(frozen=True)
class SyntheticDataset:
    """Seeded Gaussian clusters: one unit-norm mean per class scaled by
    `margin`, unit-variance noise. Larger margin = easier separation."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @classmethod
    def generate(
        cls,
        seed: int = 42,
        n_train: int = 4096,
        n_test: int = 1024,
        dim: int = 64,
        classes: int = 8,
        margin: float = 5.0,
    ) -> "SyntheticDataset":
        rng = np.random.default_rng(seed)
        means = rng.standard_normal((classes, dim))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
        means *= margin

        def draw(n: int) -> tuple[np.ndarray, np.ndarray]:
            y = rng.integers(0, classes, size=n)
            x = means[y] + rng.standard_normal((n, dim))
            return x, y

        x_tr, y_tr = draw(n_train)
        x_te, y_te = draw(n_test)
        return cls(x_tr, y_tr, x_te, y_te)


def _forward(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Returns logits and the per-layer inputs (pre-activation caches are
    recomputable from these)."""
    acts = [x]
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return h, acts


def _softmax_ce(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and dL/dlogits (already averaged over the batch)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = float(-np.log(probs[np.arange(n), y] + 1e-300).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    return loss, dlogits / n


def batch_loss(model: MlpModel, x: np.ndarray, y: np.ndarray) -> float:
    logits, _ = _forward(model, x)
    loss, _ = _softmax_ce(logits, y)
    return loss


def _backward(
    model: MlpModel, acts: list[np.ndarray], dlogits: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    d_w = [np.empty(0)] * len(model.weights)
    d_b = [np.empty(0)] * len(model.weights)
    grad = dlogits
    for i in range(len(model.weights) - 1, -1, -1):
        d_w[i] = acts[i].T @ grad
        d_b[i] = grad.sum(axis=0)
        if i > 0:
            grad = grad @ model.weights[i].T
            grad = grad * (acts[i] > 0)  # ReLU gate
    return d_w, d_b


@dataclass(frozen=True)
class GradSnapshot:
    """Per-layer weight gradients averaged over one batch."""

    weights: list[np.ndarray]


def grad_snapshot(model: MlpModel, batch: tuple[np.ndarray, np.ndarray]) -> GradSnapshot:
    x, y = batch
    logits, acts = _forward(model, x)
    _, dlogits = _softmax_ce(logits, y)
    d_w, _ = _backward(model, acts, dlogits)
    return GradSnapshot(weights=d_w)


def train(
    model: MlpModel,
    data: SyntheticDataset,
    epochs: int = 25,
    lr: float = 0.1,
    seed: int = 42,
    batch_size: int = 128,
    masks: Optional[list[np.ndarray]] = None,
) -> tuple[MlpModel, list[float]]:
    """Minibatch SGD. Deterministic given the seed. With masks given,
    masked weight entries are zeroed up front and their gradient is zeroed
    every step, so pruned entries stay exactly zero."""
    rng = np.random.default_rng(seed)
    n = data.x_train.shape[0]
    if masks is not None:
        for w, m in zip(model.weights, masks):
            w *= m
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x, y = data.x_train[idx], data.y_train[idx]
            logits, acts = _forward(model, x)
            loss, dlogits = _softmax_ce(logits, y)
            if np.isnan(loss):
                raise DivergenceError(f"loss is NaN at epoch {len(losses)}")
            epoch_loss += loss * idx.size
            d_w, d_b = _backward(model, acts, dlogits)
            for i in range(len(model.weights)):
                if masks is not None:
                    d_w[i] *= masks[i]
                model.weights[i] -= lr * d_w[i]
                model.biases[i] -= lr * d_b[i]
        losses.append(epoch_loss / n)
    return model, losses


def fine_tune_masked(
    model: MlpModel,
    data: SyntheticDataset,
    patterns: Sequence[TilePattern],
    epochs: int,
    lr: float = 0.05,
    seed: int = 42,
) -> MlpModel:
    """Continue training with each layer's pruned entries frozen at zero."""
    if len(patterns) != len(model.weights):
        raise DimensionError("need one pattern per layer")
    masks = []
    for w, p in zip(model.weights, patterns):
        if (p.k, p.n) != w.shape:
            raise DimensionError(f"pattern ({p.k},{p.n}) does not match weight {w.shape}")
        masks.append(p.keep_mask().astype(np.float64))
    model, _ = train(model, data, epochs=epochs, lr=lr, seed=seed, masks=masks)
    return model


def evaluate(
    model: MlpModel,
    data: SyntheticDataset,
    patterns: Optional[Sequence[TilePattern]] = None,
    workers: int = 1,
) -> float:
    """Test accuracy. With patterns given, inference runs through the tile
    engine in float32; otherwise a plain float64 dense forward pass."""
    if patterns is None:
        logits, _ = _forward(model, data.x_test)
        pred = logits.argmax(axis=1)
    else:
        logits = engine_logits(model, data.x_test, patterns, workers=workers)
        pred = logits.argmax(axis=1)
    return float((pred == data.y_test).mean())


def engine_logits(
    model: MlpModel,
    x: np.ndarray,
    patterns: Sequence[TilePattern],
    workers: int = 1,
) -> np.ndarray:
    """Float32 forward pass through gemm_tw with a bias+ReLU epilogue."""
    if len(patterns) != len(model.weights):
        raise DimensionError("need one pattern per layer")
    act = DenseMatrix.from_array(x.astype(np.float32))
    last = len(model.weights) - 1
    for i, (w, b, p) in enumerate(zip(model.weights, model.biases, patterns)):
        tiles = compact(DenseMatrix.from_array(w.astype(np.float32)), p)
        c = gemm_tw(act, tiles, workers=workers)
        z = c.array() + b.astype(np.float32)
        if i < last:
            z = np.maximum(z, np.float32(0.0))
        act = DenseMatrix.from_array(np.ascontiguousarray(z, dtype=np.float32))
    return act.array()


def weight_matrices(model: MlpModel) -> list[DenseMatrix]:
    return [DenseMatrix.from_array(w.astype(np.float32)) for w in model.weights]


def grad_matrices(snapshot: GradSnapshot) -> list[DenseMatrix]:
    return [DenseMatrix.from_array(g.astype(np.float32)) for g in snapshot.weights]


_MODEL_HEADER = struct.Struct("<II")  # version, layer count


def save_model(model: MlpModel, path) -> None:
    """Checkpoint: TWML header with layer shapes, then one weight matrix and
    one 1 x fan_out bias matrix per layer, each a dense-matrix record."""
    parts = [MAGIC_MODEL, _MODEL_HEADER.pack(MODEL_VERSION, len(model.weights))]
    for w in model.weights:
        parts.append(struct.pack("<II", w.shape[0], w.shape[1]))
    for w, b in zip(model.weights, model.biases):
        parts.append(dense_to_bytes(DenseMatrix.from_array(w.astype(np.float32))))
        parts.append(dense_to_bytes(DenseMatrix.from_array(b.astype(np.float32).reshape(1, -1))))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_model(path) -> MlpModel:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC_MODEL:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC_MODEL!r}")
    if len(raw) < 4 + _MODEL_HEADER.size:
        raise FormatError("header truncated")
    version, n_layers = _MODEL_HEADER.unpack_from(raw, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported version {version}")
    off = 4 + _MODEL_HEADER.size
    shapes = []
    for _ in range(n_layers):
        if len(raw) < off + 8:
            raise FormatError("shape table truncated")
        shapes.append(struct.unpack_from("<II", raw, off))
        off += 8
    weights, biases = [], []
    for rows, cols in shapes:
        w, off = dense_from_bytes(raw, off)
        if (w.rows, w.cols) != (rows, cols):
            raise FormatError(f"layer blob ({w.rows},{w.cols}) does not match ({rows},{cols})")
        b, off = dense_from_bytes(raw, off)
        if (b.rows, b.cols) != (1, cols):
            raise FormatError(f"bias blob ({b.rows},{b.cols}) does not match (1,{cols})")
        weights.append(w.array().astype(np.float64))
        biases.append(b.array().astype(np.float64).ravel())
    if off != len(raw):
        raise FormatError(f"{len(raw) - off} trailing bytes in checkpoint")
    return MlpModel(weights, biases)
