"""Synthetic classification task: model, loss, data generation and evaluation.

A one-hidden-layer ReLU perceptron over a Gaussian-mixture dataset stands in
for the original application task. All operations are pure and deterministic
given their inputs; parameters travel as a flat float64 vector so they can be
exchanged and mixed by the federation layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ModelLayout:
    """Shape description of the classifier: input_dim -> hidden_dim (ReLU) -> classes."""

    input_dim: int = 32
    hidden_dim: int = 64
    classes: int = 4

    @property
    def n_params(self) -> int:
        d, h, m = self.input_dim, self.hidden_dim, self.classes
        return d * h + h + h * m + m

    def unpack(self, values: np.ndarray):
        """Views of (W1, b1, W2, b2) into the flat vector, no copies."""
        d, h, m = self.input_dim, self.hidden_dim, self.classes
        i = 0
        w1 = values[i:i + d * h].reshape(d, h)
        i += d * h
        b1 = values[i:i + h]
        i += h
        w2 = values[i:i + h * m].reshape(h, m)
        i += h * m
        b2 = values[i:i + m]
        return w1, b1, w2, b2


@dataclass
class ModelParameters:
    """Flat parameter vector plus layout and the global round stamp that produced it."""

    values: np.ndarray
    layout: ModelLayout
    version: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.n_params,):
            raise ValueError(
                f"parameter vector has length {self.values.size}, layout requires {self.layout.n_params}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter vector contains non-finite entries")

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.values.copy(), self.layout, self.version)


@dataclass
class Dataset:
    """Feature matrix (n, d) with integer labels in 0..classes-1."""

    features: np.ndarray
    labels: np.ndarray
    classes: int
    source_seed: int  # seed used at generation time, kept for provenance

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be (n, d) with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class ClientShard:
    """Train/test split of one client's partition."""

    train: Dataset
    test: Dataset


def init_params(layout: ModelLayout, rng: np.random.Generator, version: int = 0) -> ModelParameters:
    """He-scaled random init for the hidden layer, smaller scale for the output layer."""
    d, h, m = layout.input_dim, layout.hidden_dim, layout.classes
    w1 = rng.normal(0.0, math.sqrt(2.0 / d), (d, h))
    b1 = np.zeros(h)
    w2 = rng.normal(0.0, math.sqrt(1.0 / h), (h, m))
    b2 = np.zeros(m)
    values = np.concatenate([w1.ravel(), b1, w2.ravel(), b2])
    return ModelParameters(values, layout, version)


def generate_synthetic(classes: int, dim: int, per_class: int, separation: float, seed) -> Dataset:
    """Gaussian-mixture dataset with unit-variance classes at mutual mean distance `separation`.

    Class means sit on the vertices of a regular simplex (scaled standard basis
    vectors, then centered), so every pair of means is exactly `separation`
    apart. Deterministic per seed; classes are balanced by construction.
    """
    if classes < 2:
        raise ValueError("classes must be >= 2")
    if dim < 2 or dim < classes:
        raise ValueError("dim must be >= 2 and >= classes")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if separation <= 0:
        raise ValueError("separation must be positive")
    rng = np.random.default_rng(seed)
    means = np.zeros((classes, dim))
    for c in range(classes):
        means[c, c] = separation / math.sqrt(2.0)
    means -= means.mean(axis=0)
    features = np.vstack([rng.normal(0.0, 1.0, (per_class, dim)) + means[c] for c in range(classes)])
    labels = np.repeat(np.arange(classes), per_class)
    seed_int = int(seed) if np.isscalar(seed) else -1
    return Dataset(features, labels, classes, seed_int)


def partition_iid(data: Dataset, clients: int, train_fraction: float, seed) -> list[ClientShard]:
    """Split into `clients` near-equal, class-balanced shards, each with a stratified train/test split."""
    if clients < 1:
        raise ValueError("clients must be >= 1")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    if len(data) < clients:
        raise ValueError(f"dataset of {len(data)} samples cannot be split across {clients} clients")
    rng = np.random.default_rng(seed)
    assigned: list[list[int]] = [[] for _ in range(clients)]
    for c in range(data.classes):
        idx = np.flatnonzero(data.labels == c)
        rng.shuffle(idx)
        for j, i in enumerate(idx):
            assigned[j % clients].append(int(i))
    shards = []
    for rows in assigned:
        rows = np.array(rows, dtype=np.int64)
        train_rows, test_rows = [], []
        for c in range(data.classes):
            ci = rows[data.labels[rows] == c]
            k = int(round(len(ci) * train_fraction))
            k = min(max(k, 0), len(ci))
            train_rows.extend(ci[:k])
            test_rows.extend(ci[k:])
        train_rows = np.array(train_rows, dtype=np.int64)
        test_rows = np.array(test_rows, dtype=np.int64)
        shards.append(
            ClientShard(
                train=Dataset(data.features[train_rows], data.labels[train_rows], data.classes, data.source_seed),
                test=Dataset(data.features[test_rows], data.labels[test_rows], data.classes, data.source_seed),
            )
        )
    return shards


def _forward(layout: ModelLayout, values: np.ndarray, features: np.ndarray):
    w1, b1, w2, b2 = layout.unpack(values)
    z1 = features @ w1 + b1
    a1 = np.maximum(z1, 0.0)
    logits = a1 @ w2 + b2
    return z1, a1, logits


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(shifted)
    return ez / ez.sum(axis=1, keepdims=True)


def forward_loss(params: ModelParameters, features: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and exact per-sample gradients.

    Returns:
        (loss, grads) where grads has shape (n, n_params); row i is the gradient
        of sample i's own cross-entropy term (not divided by the batch size).
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or len(features) == 0:
        raise ValueError("batch must be a non-empty (n, d) array")
    if features.shape[1] != params.layout.input_dim:
        raise ValueError(
            f"batch dimension {features.shape[1]} does not match layout input_dim {params.layout.input_dim}"
        )
    n = len(features)
    z1, a1, logits = _forward(params.layout, params.values, features)
    probs = softmax(logits)
    loss = float(-np.log(np.clip(probs[np.arange(n), labels], 1e-300, None)).mean())

    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    g_w2 = np.einsum("ni,nj->nij", a1, dlogits)
    g_b2 = dlogits
    da1 = dlogits @ params.layout.unpack(params.values)[2].T
    dz1 = da1 * (z1 > 0)
    g_w1 = np.einsum("ni,nj->nij", features, dz1)
    g_b1 = dz1
    grads = np.concatenate([g_w1.reshape(n, -1), g_b1, g_w2.reshape(n, -1), g_b2], axis=1)
    return loss, grads


def predict(params: ModelParameters, features: np.ndarray) -> np.ndarray:
    _, _, logits = _forward(params.layout, params.values, np.asarray(features, dtype=np.float64))
    return logits.argmax(axis=1)


def evaluate(params: ModelParameters, data: Dataset) -> float:
    """Fraction of argmax-correct predictions on the shard."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty shard")
    return float((predict(params, data.features) == data.labels).mean())


def pooled_test_set(shards: list[ClientShard]) -> Dataset:
    features = np.vstack([s.test.features for s in shards])
    labels = np.concatenate([s.test.labels for s in shards])
    return Dataset(features, labels, shards[0].test.classes, shards[0].test.source_seed)


def save_dataset(path, data: Dataset) -> None:
    """Plain-text export: header comment, then one sample per line as `label v1 .. vd`."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# classes={data.classes} dim={data.dim} seed={data.source_seed}\n")
        for row, label in zip(data.features, data.labels):
            fh.write(str(int(label)) + " " + " ".join(repr(float(v)) for v in row) + "\n")


def load_dataset(path) -> Dataset:
    with open(path, encoding="ascii") as fh:
        header = fh.readline().strip()
        if not header.startswith("#"):
            raise ValueError("missing dataset header line")
        meta = dict(kv.split("=") for kv in header[1:].split())
        features, labels = [], []
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            labels.append(int(parts[0]))
            features.append([float(v) for v in parts[1:]])
    return Dataset(np.array(features), np.array(labels), int(meta["classes"]), int(meta["seed"]))
