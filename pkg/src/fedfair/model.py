"""Small MLP classifier on flat parameter vectors.

Parameters live in a single float64 vector. ``ModelSpec.layout`` maps each
(layer, role) pair to its slice, with role ``"W"`` (fan_in x fan_out,
row-major) or ``"b"``. Hidden layers use tanh; the output layer is affine and
produces raw logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

ACTIVATIONS = ("tanh",)


class NonFiniteLossError(FloatingPointError):
    """Raised when a training loss becomes NaN or infinite."""


@dataclass(frozen=True)
class ModelSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self) -> None:
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("layer_sizes needs at least an input and an output size")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if sizes[-1] < 2:
            raise ValueError("a classifier needs at least 2 classes")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def num_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def layout(self) -> dict[tuple[int, str], slice]:
        out: dict[tuple[int, str], slice] = {}
        offset = 0
        for layer, (fan_in, fan_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            out[(layer, "W")] = slice(offset, offset + fan_in * fan_out)
            offset += fan_in * fan_out
            out[(layer, "b")] = slice(offset, offset + fan_out)
            offset += fan_out
        return out

    def top_layer_mask(self) -> np.ndarray:
        """Boolean mask selecting the final affine map (weights and bias)."""
        mask = np.zeros(self.num_params, dtype=bool)
        top = self.num_layers - 1
        lay = self.layout
        mask[lay[(top, "W")]] = True
        mask[lay[(top, "b")]] = True
        return mask

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        check_params(params, self)
        lay = self.layout
        layers = []
        for layer, (fan_in, fan_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            W = params[lay[(layer, "W")]].reshape(fan_in, fan_out)
            b = params[lay[(layer, "b")]]
            layers.append((W, b))
        return layers


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if X.ndim == 1 and X.size == 0:
            X = X.reshape(0, 0)
        if X.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {X.shape}")
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
        if y.size and y.min() < 0:
            raise ValueError("labels must be non-negative")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx, dtype=np.int64)
        return Batch(self.features[idx].reshape(len(idx), self.features.shape[1]), self.labels[idx])

    @staticmethod
    def concat(batches: list["Batch"], dims: int) -> "Batch":
        feats = [b.features for b in batches if len(b)]
        labels = [b.labels for b in batches if len(b)]
        if not feats:
            return Batch(np.zeros((0, dims)), np.zeros(0, dtype=np.int64))
        return Batch(np.vstack(feats), np.concatenate(labels))


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 0.1
    momentum: float = 0.0
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 1

    def __post_init__(self) -> None:
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not self.weight_decay >= 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def check_params(params: np.ndarray, spec: ModelSpec) -> None:
    if params.ndim != 1 or params.shape[0] != spec.num_params:
        raise ValueError(f"parameter vector has shape {params.shape}, expected ({spec.num_params},)")


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases; deterministic in (spec, seed)."""
    rng = np.random.default_rng(seed)
    params = np.zeros(spec.num_params)
    lay = spec.layout
    for layer, (fan_in, fan_out) in enumerate(zip(spec.layer_sizes[:-1], spec.layer_sizes[1:])):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        params[lay[(layer, "W")]] = rng.uniform(-bound, bound, size=fan_in * fan_out)
    return params


def _forward_cache(params: np.ndarray, spec: ModelSpec, features: np.ndarray):
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(f"features have shape {X.shape}, model expects (*, {spec.input_dim})")
    layers = spec.unpack(params)
    acts = [X]
    h = X
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        h = np.tanh(z) if i < len(layers) - 1 else z
        acts.append(h)
    return layers, acts


def forward(params: np.ndarray, spec: ModelSpec, features: np.ndarray) -> np.ndarray:
    return _forward_cache(params, spec, features)[1][-1]


def log_softmax(logits: np.ndarray, T: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / T
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray, T: float = 1.0) -> np.ndarray:
    """Row-wise tempered softmax with max subtraction."""
    if not T > 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input must be finite")
    z = z / T
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"label out of range for {logits.shape[1]} classes")
    return labels


def cross_entropy(logits: np.ndarray, labels) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(logits, labels)
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def cross_entropy_grad(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(logits, labels)
    n = len(labels)
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    d = np.exp(logp)
    d[rows, labels] -= 1.0
    return loss, d / n


LogitLoss = Callable[[np.ndarray, Batch], "tuple[float, np.ndarray]"]
Penalty = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


def _plain_ce(logits: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    return cross_entropy_grad(logits, batch.labels)


@dataclass(frozen=True)
class Loss:
    """A batch loss: a term on the logits plus an optional parameter penalty.

    ``data(logits, batch)`` returns the mean loss and its gradient with respect
    to the logits; ``penalty(params)`` returns a value and a gradient with
    respect to the parameter vector.
    """

    data: LogitLoss = field(default=_plain_ce)
    penalty: Optional[Penalty] = None


CROSS_ENTROPY = Loss()


def _backward(layers, acts, dlogits: np.ndarray, spec: ModelSpec) -> np.ndarray:
    g = np.empty(spec.num_params)
    lay = spec.layout
    delta = dlogits
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        h_in = acts[i]
        g[lay[(i, "W")]] = (h_in.T @ delta).reshape(-1)
        g[lay[(i, "b")]] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ W.T) * (1.0 - h_in * h_in)
    return g


def loss_and_grad(
    params: np.ndarray, spec: ModelSpec, batch: Batch, loss: Loss = CROSS_ENTROPY
) -> tuple[float, np.ndarray]:
    layers, acts = _forward_cache(params, spec, batch.features)
    value, dlogits = loss.data(acts[-1], batch)
    g = _backward(layers, acts, dlogits, spec)
    if loss.penalty is not None:
        pv, pg = loss.penalty(params)
        value = value + pv
        g = g + pg
    return value, g


def grad(params: np.ndarray, spec: ModelSpec, batch: Batch, loss: Loss = CROSS_ENTROPY) -> np.ndarray:
    return loss_and_grad(params, spec, batch, loss)[1]


def per_sample_grads(params: np.ndarray, spec: ModelSpec, batch: Batch) -> np.ndarray:
    """Rows are gradients of -log p(label | x) for each sample."""
    layers, acts = _forward_cache(params, spec, batch.features)
    labels = _check_labels(acts[-1], batch.labels)
    n = len(labels)
    d = softmax(acts[-1])
    d[np.arange(n), labels] -= 1.0
    out = np.empty((n, spec.num_params))
    lay = spec.layout
    delta = d
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        h_in = acts[i]
        out[:, lay[(i, "W")]] = np.einsum("ni,no->nio", h_in, delta).reshape(n, -1)
        out[:, lay[(i, "b")]] = delta
        if i > 0:
            delta = (delta @ W.T) * (1.0 - h_in * h_in)
    return out


def sgd_step(
    params: np.ndarray, grads: np.ndarray, cfg: SgdConfig, velocity: Optional[np.ndarray] = None
) -> tuple[np.ndarray, np.ndarray]:
    """Heavy-ball momentum with weight decay folded into the gradient."""
    if grads.shape != params.shape:
        raise ValueError(f"gradient shape {grads.shape} does not match params {params.shape}")
    if velocity is None:
        velocity = np.zeros_like(params)
    elif velocity.shape != params.shape:
        raise ValueError("momentum state does not match params")
    g = grads + cfg.weight_decay * params if cfg.weight_decay else grads
    v = cfg.momentum * velocity + g
    return params - cfg.lr * v, v


def train(
    params: np.ndarray,
    spec: ModelSpec,
    data: Batch,
    cfg: SgdConfig,
    rng: np.random.Generator,
    loss: Loss = CROSS_ENTROPY,
    mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Mini-batch SGD over ``cfg.epochs`` reshuffled passes of ``data``.

    Entries outside ``mask`` are carried over unchanged.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    params = np.array(params, dtype=np.float64)
    velocity = np.zeros_like(params)
    n = len(data)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = data.subset(order[start : start + cfg.batch_size])
            value, g = loss_and_grad(params, spec, batch, loss)
            if not math.isfinite(value):
                raise NonFiniteLossError(f"loss became {value}")
            new, velocity = sgd_step(params, g, cfg, velocity)
            params = np.where(mask, new, params) if mask is not None else new
            if not np.all(np.isfinite(params)):
                raise NonFiniteLossError("parameters became non-finite")
    return params


def predict(params: np.ndarray, spec: ModelSpec, features: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(forward(params, spec, features), axis=1)
