"""Dense ReLU network trained with plain mini-batch SGD on weighted cross-entropy.

Everything runs in float64. Weights are stored fan_in x fan_out so a batch
``X`` (N x D) flows forward as ``X @ W + b``.
"""
from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, RsnError

HIDDEN = (200, 200, 200)
DROPOUT_AFTER = 1  # zero-based hidden layer index: the second hidden layer

MODEL_MAGIC = b"RSNMLP\x00\x00"
MODEL_VERSION = 1


class NonFiniteLoss(RsnError):
    pass


class AllEmpty(RsnError):
    pass


@dataclass
class MlpModel:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    init_seed: int = 0

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpModel":
        return MlpModel(list(self.layer_dims), [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.init_seed)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 25
    dropout_p: float = 0.66
    seed: int = 0
    class_weight_mode: str = "inverse_frequency"

    def __post_init__(self):
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.class_weight_mode not in ("inverse_frequency", "none"):
            raise ValueError(f"unknown class_weight_mode {self.class_weight_mode!r}")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    train_duration_s: float = 0.0
    inference_duration_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "train_accuracy": self.train_accuracy,
            "val_accuracy": self.val_accuracy,
            "train_duration_s": self.train_duration_s,
            "inference_duration_s": self.inference_duration_s,
        }


def class_weights(counts) -> np.ndarray:
    """Inverse-frequency weights ``N / (C_present * count_c)``.

    Absent classes never appear as targets; they get weight 1 so every entry
    stays positive.
    """
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise AllEmpty("no class has any examples")
    present = counts > 0
    w = np.ones_like(counts)
    w[present] = total / (present.sum() * counts[present])
    return w


def mlp_init(d: int, c: int, seed: int, hidden=HIDDEN) -> MlpModel:
    if d < 1 or c < 2:
        raise ValueError(f"need D >= 1 and C >= 2, got D={d}, C={c}")
    dims = [d, *hidden, c]
    rng = np.random.default_rng(seed)
    weights = [rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in) for fan_in, fan_out in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(n) for n in dims[1:]]
    return MlpModel(dims, weights, biases, seed)


def parameter_count(dims) -> int:
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


def mlp_forward(model: MlpModel, x, train: bool = False, dropout_p: float = 0.0, rng=None, dropout_mask=None):
    """Logits for a batch (N x D) or single vector (D,), plus a backprop cache.

    In train mode inverted dropout is applied to the second hidden layer's
    activations, either from ``dropout_mask`` or sampled from ``rng``.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != model.layer_dims[0]:
        raise DimensionMismatch(f"expected {model.layer_dims[0]} features, got {x.shape[1]}")
    acts = [x]
    masks = []
    h = x
    n_hidden = len(model.weights) - 1
    for i in range(n_hidden):
        h = np.maximum(h @ model.weights[i] + model.biases[i], 0.0)
        mask = None
        if train and i == DROPOUT_AFTER and (dropout_p > 0 or dropout_mask is not None):
            if dropout_mask is None:
                dropout_mask = (rng.random(h.shape) >= dropout_p) / (1.0 - dropout_p)
            mask = dropout_mask
            h = h * mask
        masks.append(mask)
        acts.append(h)
    logits = h @ model.weights[-1] + model.biases[-1]
    cache = (acts, masks)
    return (logits[0] if single else logits), cache


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def weighted_cross_entropy(logits, target, weights=None):
    """Loss and gradient for one example, or the batch mean for N x C logits."""
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    z = np.atleast_2d(logits)
    t = np.atleast_1d(np.asarray(target, dtype=np.intp))
    w_all = np.ones(z.shape[1]) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w_all[t]
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted[np.arange(len(t)), t] - log_norm
    probs = np.exp(shifted - log_norm[:, None])
    grad = probs
    grad[np.arange(len(t)), t] -= 1.0
    grad *= w[:, None]
    if single:
        return float(-w[0] * log_p[0]), grad[0]
    n = len(t)
    return float(np.mean(-w * log_p)), grad / n


def mlp_backward(model: MlpModel, cache, dlogits):
    acts, masks = cache
    dlogits = np.atleast_2d(dlogits)
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.biases)
    delta = dlogits
    for i in range(len(model.weights) - 1, -1, -1):
        grads_w[i] = acts[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i == 0:
            break
        delta = delta @ model.weights[i].T
        if masks[i - 1] is not None:
            delta = delta * masks[i - 1]
        delta = delta * (acts[i] > 0)
    return grads_w, grads_b


def mlp_predict(model: MlpModel, x):
    """Class index (lowest index on ties) and probabilities; batched input gives arrays."""
    logits, _ = mlp_forward(model, x)
    probs = softmax(logits)
    return np.argmax(probs, axis=-1), probs


def accuracy(model: MlpModel, x, y) -> float:
    if len(y) == 0:
        return float("nan")
    pred, _ = mlp_predict(model, x)
    return float(np.mean(pred == np.asarray(y)))


def mlp_train(trainset, valset, cfg: TrainConfig, weights=None, model: MlpModel | None = None, n_classes: int | None = None):
    """Plain SGD (no momentum, no weight decay).

    ``trainset``/``valset`` are ``(X, y)`` pairs; ``valset`` may be None.
    ``weights`` defaults to inverse-frequency weights over the training labels
    (or all ones when ``cfg.class_weight_mode == 'none'``).
    """
    x_tr, y_tr = np.asarray(trainset[0], dtype=np.float64), np.asarray(trainset[1], dtype=np.intp)
    if len(y_tr) == 0:
        raise ValueError("training set is empty")
    if n_classes is None:
        n_classes = model.layer_dims[-1] if model is not None else int(y_tr.max()) + 1
    if model is None:
        model = mlp_init(x_tr.shape[1], max(2, n_classes), cfg.seed)
    if x_tr.shape[1] != model.layer_dims[0]:
        raise DimensionMismatch(f"model expects {model.layer_dims[0]} features, got {x_tr.shape[1]}")
    if weights is None:
        if cfg.class_weight_mode == "none":
            weights = np.ones(model.layer_dims[-1])
        else:
            weights = class_weights(np.bincount(y_tr, minlength=model.layer_dims[-1]))

    rng = np.random.default_rng(cfg.seed)
    hist = TrainHistory()
    n = len(y_tr)
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            logits, cache = mlp_forward(model, x_tr[idx], train=True, dropout_p=cfg.dropout_p, rng=rng)
            loss, dlogits = weighted_cross_entropy(logits, y_tr[idx], weights)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss} at epoch {epoch + 1}, batch {b + 1}")
            gw, gb = mlp_backward(model, cache, dlogits)
            for i in range(len(model.weights)):
                model.weights[i] -= cfg.learning_rate * gw[i]
                model.biases[i] -= cfg.learning_rate * gb[i]
            total += loss * len(idx)
        hist.train_loss.append(total / n)
        hist.train_accuracy.append(accuracy(model, x_tr, y_tr))
        if valset is not None and len(valset[1]):
            hist.val_accuracy.append(accuracy(model, valset[0], valset[1]))
        else:
            hist.val_accuracy.append(float("nan"))
    hist.train_duration_s = time.perf_counter() - t0

    x_inf = valset[0] if valset is not None and len(valset[1]) else x_tr
    t1 = time.perf_counter()
    mlp_predict(model, x_inf)
    hist.inference_duration_s = time.perf_counter() - t1
    return model, hist


def _loss_of(model, x, target, weights):
    logits, _ = mlp_forward(model, x)
    return weighted_cross_entropy(logits, target, weights)[0]


def grad_check(model: MlpModel, x, target: int, weights=None, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences over all parameters.

    Dropout is off. Relative error is ``|a - n| / max(|a|, |n|)``; entries
    where both gradients are below 1e-8 in magnitude are compared absolutely.
    """
    logits, cache = mlp_forward(model, x)
    _, dlogits = weighted_cross_entropy(logits, target, weights)
    gw, gb = mlp_backward(model, cache, dlogits)
    worst = 0.0
    for params, grads in ((model.weights, gw), (model.biases, gb)):
        for p, g in zip(params, grads):
            flat_p = p.reshape(-1)
            flat_g = g.reshape(-1)
            for j in range(flat_p.size):
                orig = flat_p[j]
                flat_p[j] = orig + h
                up = _loss_of(model, x, target, weights)
                flat_p[j] = orig - h
                down = _loss_of(model, x, target, weights)
                flat_p[j] = orig
                numeric = (up - down) / (2 * h)
                analytic = flat_g[j]
                scale = max(abs(analytic), abs(numeric))
                err = abs(analytic - numeric) / scale if scale > 1e-8 else abs(analytic - numeric)
                worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# model files
#
# Layout (all little-endian):
#   8 bytes  magic  b"RSNMLP\0\0"
#   u32      format version (1)
#   u32      number of layer dims L
#   i64      init seed
#   L x u64  layer dims
#   per layer l = 0..L-2: weights dims[l] x dims[l+1] (row-major f64), then biases dims[l+1] (f64)

def save_model(model: MlpModel, path) -> None:
    dims = model.layer_dims
    parts = [MODEL_MAGIC, struct.pack("<IIq", MODEL_VERSION, len(dims), int(model.init_seed)), struct.pack(f"<{len(dims)}Q", *dims)]
    for w, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path) -> MlpModel:
    raw = Path(path).read_bytes()
    if raw[:8] != MODEL_MAGIC:
        raise RsnError(f"{path}: not a model file")
    version, n_dims, seed = struct.unpack_from("<IIq", raw, 8)
    if version != MODEL_VERSION:
        raise RsnError(f"{path}: unsupported model format version {version}")
    off = 24
    dims = list(struct.unpack_from(f"<{n_dims}Q", raw, off))
    off += 8 * n_dims
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        weights.append(np.frombuffer(raw, dtype="<f8", count=a * b, offset=off).reshape(a, b).astype(np.float64))
        off += 8 * a * b
        biases.append(np.frombuffer(raw, dtype="<f8", count=b, offset=off).astype(np.float64))
        off += 8 * b
    if off != len(raw):
        raise RsnError(f"{path}: trailing or missing bytes")
    return MlpModel(dims, weights, biases, seed)
