"""DP-SGD local training: per-sample clipping, Gaussian noising, descent.

Noise convention: the Gaussian draw N(0, sigma^2 C^2 I) is added to the SUM of
clipped per-sample gradients and the result is divided by the batch size, so
the noise contribution to the averaged gradient has per-coordinate standard
deviation sigma*C/|b|. This is the convention under which the accountant's
(q, sigma) analysis applies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from hetfed.task import Dataset, ModelParameters, forward_loss


class TrainingDivergedError(RuntimeError):
    """Raised when gradients or the loss stop being finite during local training."""


@dataclass(frozen=True)
class DpConfig:
    clip_norm: float = 1.0
    noise_multiplier: float = 1.0  # sigma = 0 permitted for non-private ablations
    learning_rate: float = 0.02
    batch_size: int = 9
    local_epochs: int = 1

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")


@dataclass(frozen=True)
class LocalTrainResult:
    params: ModelParameters
    mechanism_applications: int  # one per noised batch, consumed by the accountant


def _safe_norms(grads: np.ndarray) -> np.ndarray:
    # scale-guarded row norms: survives entries near the float overflow limit
    scale = np.abs(grads).max(axis=-1, keepdims=True)
    scale = np.where(scale > 0, scale, 1.0)
    return np.squeeze(scale, -1) * np.linalg.norm(grads / scale, axis=-1)


def clip_per_sample(gradient: np.ndarray, clip_norm: float) -> np.ndarray:
    """Rescale so the L2 norm is at most clip_norm: g / max(1, ||g||/C)."""
    gradient = np.asarray(gradient, dtype=np.float64)
    if not np.all(np.isfinite(gradient)):
        raise TrainingDivergedError("gradient contains non-finite components")
    norm = float(_safe_norms(gradient[None, :])[0]) if gradient.ndim == 1 else None
    if norm is None:
        raise ValueError("clip_per_sample expects a single flat gradient vector")
    return gradient / max(1.0, norm / clip_norm)


def _clip_batch(grads: np.ndarray, clip_norm: float) -> np.ndarray:
    if not np.all(np.isfinite(grads)):
        raise TrainingDivergedError("per-sample gradients contain non-finite components")
    norms = _safe_norms(grads)
    factors = np.minimum(1.0, clip_norm / np.where(norms > 0, norms, 1.0))
    return grads * factors[:, None]


def noised_mean_gradient(per_sample_gradients: np.ndarray, config: DpConfig, rng: np.random.Generator) -> np.ndarray:
    """Mean of (already clipped) per-sample gradients plus Gaussian noise.

    g_tilde = ( sum_i g_i + N(0, sigma^2 C^2 I) ) / |b|. A zero noise
    multiplier consumes no randomness from the stream.
    """
    grads = np.asarray(per_sample_gradients, dtype=np.float64)
    if grads.ndim == 1:
        grads = grads[None, :]
    if grads.size == 0 or len(grads) == 0:
        raise ValueError("batch of per-sample gradients must be non-empty")
    total = grads.sum(axis=0)
    if config.noise_multiplier > 0:
        total = total + rng.normal(0.0, config.noise_multiplier * config.clip_norm, total.shape)
    return total / len(grads)


def local_train(
    start_params: ModelParameters,
    data_shard: Dataset,
    config: DpConfig,
    rng: np.random.Generator,
) -> LocalTrainResult:
    """Run E local epochs of DP-SGD over the shard.

    Batches come from a seed-deterministic shuffle per epoch; the final short
    batch is trained on and counted as one mechanism application like any
    other. Output is a pure function of (start_params, shard, config, rng
    state).
    """
    if len(data_shard) == 0:
        raise ValueError("data shard must be non-empty")
    values = start_params.values.copy()
    params = ModelParameters(values, start_params.layout, start_params.version)
    n = len(data_shard)
    steps = 0
    for _ in range(config.local_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            rows = order[lo:lo + config.batch_size]
            loss, grads = forward_loss(params, data_shard.features[rows], data_shard.labels[rows])
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss after {steps} steps")
            clipped = _clip_batch(grads, config.clip_norm)
            g = noised_mean_gradient(clipped, config, rng)
            values -= config.learning_rate * g
            steps += 1
    if not np.all(np.isfinite(values)):
        raise TrainingDivergedError("parameters diverged during local training")
    return LocalTrainResult(params=params, mechanism_applications=steps)


def expected_mechanism_applications(shard_size: int, config: DpConfig) -> int:
    return math.ceil(shard_size / config.batch_size) * config.local_epochs
