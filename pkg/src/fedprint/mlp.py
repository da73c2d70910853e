"""From-scratch multilayer perceptron with hand-derived backprop and Adam.

The topology family is fixed: dense layers, ReLU on hidden layers, softmax
output, cross-entropy loss. Weights expose a canonical flat ordering
(layer-major, weight matrix before bias, row-major within a matrix) so
aggregation strategies can treat a model as a single parameter vector.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
import numpy as np

from .errors import ConfigurationError, InvalidInputError

DEFAULT_LAYER_SIZES = (13, 100, 100, 4)


@dataclass(frozen=True)
class MlpArchitecture:
    """Layer widths, input first, output (class count) last."""

    layer_sizes: tuple[int, ...] = DEFAULT_LAYER_SIZES

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 3:
            raise ConfigurationError("architecture needs at least one hidden layer")
        if any(s < 1 for s in sizes):
            raise ConfigurationError("layer sizes must be positive")

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_params(self) -> int:
        return sum(
            fan_in * fan_out + fan_out
            for fan_in, fan_out in zip(self.layer_sizes, self.layer_sizes[1:])
        )


@dataclass
class ModelWeights:
    """Per-layer weight matrices (fan_in x fan_out) and bias vectors."""

    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def architecture(self) -> MlpArchitecture:
        return MlpArchitecture(self.layer_sizes)

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            layer_sizes=self.layer_sizes,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )


def init_weights(arch: MlpArchitecture, seed: int) -> ModelWeights:
    """Deterministic uniform init scaled by fan-in/fan-out; biases zero.

    The uniform range is ±sqrt(6 / (fan_in + fan_out)), which keeps the
    initial softmax close to uniform.
    """
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(arch.layer_sizes, arch.layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelWeights(arch.layer_sizes, weights, biases)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=1, keepdims=True)


def _check_batch(weights: ModelWeights, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != weights.layer_sizes[0]:
        raise InvalidInputError(
            f"expected batch of shape (n, {weights.layer_sizes[0]}), "
            f"got {batch.shape}"
        )
    return batch


def _forward_pass(
    weights: ModelWeights, batch: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Returns the hidden activations (inputs to each layer) and the logits."""
    activations = [batch]
    a = batch
    last = len(weights.weights) - 1
    for i, (w, b) in enumerate(zip(weights.weights, weights.biases)):
        z = a @ w + b
        if i < last:
            a = np.maximum(z, 0.0)
            activations.append(a)
        else:
            return activations, z
    raise AssertionError("unreachable")


def forward(weights: ModelWeights, batch: np.ndarray) -> np.ndarray:
    """Class probabilities for a batch; every row sums to 1."""
    batch = _check_batch(weights, batch)
    _, logits = _forward_pass(weights, batch)
    return softmax(logits)


def predict(weights: ModelWeights, batch: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties break to the lowest class index."""
    return np.argmax(forward(weights, batch), axis=1)


def cross_entropy_loss(
    weights: ModelWeights, batch: np.ndarray, labels: np.ndarray
) -> float:
    """Mean cross-entropy of the batch, computed from logits for stability."""
    batch = _check_batch(weights, batch)
    labels = np.asarray(labels)
    _, logits = _forward_pass(weights, batch)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(labels)), labels].mean())


def loss_and_gradients(
    weights: ModelWeights, batch: np.ndarray, labels: np.ndarray
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Cross-entropy loss plus gradients w.r.t. every weight matrix and bias."""
    batch = _check_batch(weights, batch)
    labels = np.asarray(labels)
    n = batch.shape[0]

    activations, logits = _forward_pass(weights, batch)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(exps.sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())

    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    grad_w: list[np.ndarray] = [np.empty(0)] * len(weights.weights)
    grad_b: list[np.ndarray] = [np.empty(0)] * len(weights.biases)
    for i in range(len(weights.weights) - 1, -1, -1):
        grad_w[i] = activations[i].T @ delta
        grad_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ weights.weights[i].T) * (activations[i] > 0.0)
    return loss, grad_w, grad_b


@dataclass
class AdamState:
    """Adam moment accumulators plus hyperparameters.

    A fresh state has zeroed moments and step 0; ``step_count`` drives the
    bias correction.
    """

    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m_weights: list[np.ndarray] = field(default_factory=list)
    v_weights: list[np.ndarray] = field(default_factory=list)
    m_biases: list[np.ndarray] = field(default_factory=list)
    v_biases: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def fresh(
        cls,
        arch: MlpArchitecture,
        learning_rate: float = 0.001,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ) -> "AdamState":
        shapes = list(zip(arch.layer_sizes, arch.layer_sizes[1:]))
        return cls(
            learning_rate=learning_rate,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
            step_count=0,
            m_weights=[np.zeros(s) for s in shapes],
            v_weights=[np.zeros(s) for s in shapes],
            m_biases=[np.zeros(s[1]) for s in shapes],
            v_biases=[np.zeros(s[1]) for s in shapes],
        )

    def copy(self) -> "AdamState":
        return AdamState(
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            step_count=self.step_count,
            m_weights=[m.copy() for m in self.m_weights],
            v_weights=[v.copy() for v in self.v_weights],
            m_biases=[m.copy() for m in self.m_biases],
            v_biases=[v.copy() for v in self.v_biases],
        )


def _adam_step(
    weights: ModelWeights,
    adam: AdamState,
    grad_w: list[np.ndarray],
    grad_b: list[np.ndarray],
) -> None:
    """One in-place Adam update of ``weights`` and ``adam``."""
    adam.step_count += 1
    t = adam.step_count
    correction1 = 1.0 - adam.beta1**t
    correction2 = 1.0 - adam.beta2**t
    for params, grads, ms, vs in (
        (weights.weights, grad_w, adam.m_weights, adam.v_weights),
        (weights.biases, grad_b, adam.m_biases, adam.v_biases),
    ):
        for p, g, m, v in zip(params, grads, ms, vs):
            m *= adam.beta1
            m += (1.0 - adam.beta1) * g
            v *= adam.beta2
            v += (1.0 - adam.beta2) * np.square(g)
            p -= adam.learning_rate * (m / correction1) / (
                np.sqrt(v / correction2) + adam.epsilon
            )


def train_epoch(
    weights: ModelWeights,
    adam: AdamState,
    data: np.ndarray,
    labels: np.ndarray,
    batch_size: int,
    rng_seed: int,
) -> tuple[ModelWeights, AdamState, float]:
    """One shuffled pass over the data; returns updated copies plus the
    per-sample mean loss. Deterministic for a fixed seed; the inputs are
    not mutated."""
    data = np.asarray(data, dtype=np.float64)
    labels = np.asarray(labels)
    if data.shape[0] == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    if data.shape[0] != labels.shape[0]:
        raise InvalidInputError("data and labels are misaligned")
    if batch_size < 1:
        raise InvalidInputError("batch_size must be >= 1")

    weights = weights.copy()
    adam = adam.copy()
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(data.shape[0])

    total_loss = 0.0
    for start in range(0, data.shape[0], batch_size):
        batch_idx = order[start : start + batch_size]
        loss, grad_w, grad_b = loss_and_gradients(
            weights, data[batch_idx], labels[batch_idx]
        )
        _adam_step(weights, adam, grad_w, grad_b)
        total_loss += loss * len(batch_idx)
    return weights, adam, total_loss / data.shape[0]


def evaluate(
    weights: ModelWeights, data: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Accuracy and confusion matrix (rows = true class, columns = predicted)."""
    data = np.asarray(data, dtype=np.float64)
    labels = np.asarray(labels)
    if data.shape[0] == 0:
        raise InvalidInputError("cannot evaluate on an empty dataset")
    num_classes = weights.layer_sizes[-1]
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    chunk = 65536
    for start in range(0, data.shape[0], chunk):
        preds = predict(weights, data[start : start + chunk])
        np.add.at(confusion, (labels[start : start + chunk], preds), 1)
    accuracy = float(np.trace(confusion) / confusion.sum())
    return accuracy, confusion


def flatten(weights: ModelWeights) -> np.ndarray:
    """Canonical flat parameter vector: per layer, weights then bias."""
    parts: list[np.ndarray] = []
    for w, b in zip(weights.weights, weights.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def unflatten(arch: MlpArchitecture, vector: np.ndarray) -> ModelWeights:
    """Inverse of :func:`flatten`; validates the vector length."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.ndim != 1 or vector.size != arch.num_params:
        raise InvalidInputError(
            f"expected a flat vector of length {arch.num_params}, "
            f"got shape {vector.shape}"
        )
    weights, biases = [], []
    cursor = 0
    for fan_in, fan_out in zip(arch.layer_sizes, arch.layer_sizes[1:]):
        weights.append(
            vector[cursor : cursor + fan_in * fan_out].reshape(fan_in, fan_out).copy()
        )
        cursor += fan_in * fan_out
        biases.append(vector[cursor : cursor + fan_out].copy())
        cursor += fan_out
    return ModelWeights(arch.layer_sizes, weights, biases)


CHECKPOINT_FORMAT = "fedprint-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: str | os.PathLike,
    weights: ModelWeights,
    preprocessing: dict | None = None,
) -> None:
    """Write a JSON checkpoint; floats round-trip exactly.

    ``preprocessing`` carries whatever the consumer needs to rebuild the
    input pipeline (here: the min-max bounds used at training time).
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layer_sizes": list(weights.layer_sizes),
        "parameters": flatten(weights).tolist(),
        "preprocessing": preprocessing or {},
    }
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle)
    os.replace(tmp_path, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[ModelWeights, dict]:
    with open(path, "r", encoding="utf-8") as handle:
        payload = json.load(handle)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInputError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise InvalidInputError(
            f"unsupported checkpoint version {payload.get('version')}"
        )
    arch = MlpArchitecture(tuple(payload["layer_sizes"]))
    vector = np.asarray(payload["parameters"], dtype=np.float64)
    return unflatten(arch, vector), payload.get("preprocessing", {})
