"""Surrogate relation head and the client-side SGD loop.

The local model is a linear softmax classifier that predicts a predicate
super-class from one-hot subject and object super-classes. Parameters live
in one flat float64 vector: the weight matrix (row-major,
``[num_predicates, feature_dim]``) followed by the bias.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Layout:
    num_classes: int
    feature_dim: int

    @property
    def size(self) -> int:
        return self.num_classes * (self.feature_dim + 1)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size)

    def unpack(self, params: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        params = np.asarray(params)
        if params.shape != (self.size,):
            raise ValueError(f"parameter vector has shape {params.shape}, layout expects ({self.size},)")
        split = self.num_classes * self.feature_dim
        return params[:split].reshape(self.num_classes, self.feature_dim), params[split:]

    @classmethod
    def for_dims(cls, dims: Sequence[int]) -> "Layout":
        n_obj, n_obj2, n_pred = dims
        return cls(n_pred, n_obj + n_obj2)


@dataclass(frozen=True)
class LocalTrainConfig:
    epochs: int = 1
    batch_size: int = 16
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip_norm: float = 35.0
    decay_before_clip: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not self.grad_clip_norm > 0:
            raise ValueError("grad_clip_norm must be > 0")


@dataclass(frozen=True)
class RelationExample:
    feature: np.ndarray
    label: int


def featurize(relation, dims: Sequence[int]) -> RelationExample:
    s, o, p = (int(v) for v in relation)
    n_subj, n_obj, n_pred = dims
    if not (0 <= s < n_subj and 0 <= o < n_obj and 0 <= p < n_pred):
        raise IndexError(f"relation {(s, o, p)} out of range for dims {tuple(dims)}")
    x = np.zeros(n_subj + n_obj)
    x[s] = 1.0
    x[n_subj + o] = 1.0
    return RelationExample(x, p)


def featurize_many(relations: Iterable, dims: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised featurize: returns ``(features, labels)`` arrays."""
    rel = np.asarray(list(relations), dtype=np.int64).reshape(-1, 3)
    n_subj, n_obj, n_pred = dims
    if len(rel) and ((rel < 0).any() or (rel >= (n_subj, n_obj, n_pred)).any()):
        raise IndexError(f"relation index out of range for dims {tuple(dims)}")
    X = np.zeros((len(rel), n_subj + n_obj))
    rows = np.arange(len(rel))
    X[rows, rel[:, 0]] = 1.0
    X[rows, n_subj + rel[:, 1]] = 1.0
    return X, rel[:, 2].copy()


def stack_examples(batch: Sequence[RelationExample]) -> tuple[np.ndarray, np.ndarray]:
    return np.vstack([ex.feature for ex in batch]), np.array([ex.label for ex in batch], dtype=np.int64)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(params: np.ndarray, layout: Layout, features: np.ndarray) -> np.ndarray:
    W, b = layout.unpack(params)
    return softmax(features @ W.T + b)


def loss_and_grad(params: np.ndarray, layout: Layout, features, labels=None) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its analytic gradient.

    ``features`` may also be a list of RelationExample, in which case
    ``labels`` is omitted.
    """
    if labels is None:
        features, labels = stack_examples(features)
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("empty batch")
    if X.shape[1] != layout.feature_dim:
        raise ValueError(f"feature dim {X.shape[1]} != layout feature dim {layout.feature_dim}")
    W, b = layout.unpack(params)
    logits = X @ W.T + b
    shift = logits.max(axis=1, keepdims=True)
    z = logits - shift
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(X))
    loss = float(np.mean(log_norm - z[rows, y]))
    err = np.exp(z - log_norm[:, None])
    err[rows, y] -= 1.0
    err /= len(X)
    grad = np.concatenate([(err.T @ X).ravel(), err.sum(axis=0)])
    return loss, grad


def sgd_step(params: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
             cfg: LocalTrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """One SGD update: clip the raw gradient, add weight decay, apply momentum."""
    if params.shape != grad.shape or params.shape != velocity.shape:
        raise ValueError("params, grad and velocity must share a shape")
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite gradient")
    g = grad
    if cfg.decay_before_clip and cfg.weight_decay:
        g = g + cfg.weight_decay * params
    norm = float(np.sqrt(np.dot(g, g)))
    if norm > cfg.grad_clip_norm:
        g = g * (cfg.grad_clip_norm / norm)
    if not cfg.decay_before_clip and cfg.weight_decay:
        g = g + cfg.weight_decay * params
    new_velocity = cfg.momentum * velocity + g
    return params - cfg.learning_rate * new_velocity, new_velocity


def local_train(params: np.ndarray, layout: Layout, features, labels, cfg: LocalTrainConfig,
                seed) -> np.ndarray:
    """Run ``cfg.epochs`` of mini-batch SGD from ``params``; velocity starts at zero."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(X) == 0:
        raise TrainingError("client has no training data")
    rng = np.random.default_rng(seed)
    w = np.array(params, dtype=np.float64, copy=True)
    velocity = np.zeros_like(w)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grad = loss_and_grad(w, layout, X[idx], y[idx])
            w, velocity = sgd_step(w, grad, velocity, cfg)
    return w


def save_params(path, params: np.ndarray, layout: Layout):
    """JSON header line, then the raw little-endian float64 vector."""
    header = {"format": "f8le", "length": int(params.size), "layout": asdict(layout)}
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(np.asarray(params, dtype="<f8").tobytes())


def load_params(path) -> tuple[np.ndarray, Layout]:
    with open(path, "rb") as f:
        header = json.loads(f.readline())
        data = np.frombuffer(f.read(), dtype="<f8").astype(np.float64)
    layout = Layout(**header["layout"])
    if data.size != header["length"] or data.size != layout.size:
        raise ValueError(f"checkpoint length {data.size} does not match header")
    return data, layout
