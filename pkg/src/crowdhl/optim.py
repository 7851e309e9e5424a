"""Cross-entropy loss, RMSprop and the minibatch training loop."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import NumericError, ShapeError, UsageError
from .nn import ModelParams, cross_entropy, model_backward, model_forward, predict, write_checkpoint
from .rng import SplitMix64

log = logging.getLogger(__name__)

__all__ = [
    "RmspropState",
    "TrainConfig",
    "TrainHistory",
    "cross_entropy",
    "rmsprop_step",
    "train",
    "evaluate_loss",
    "write_history",
]


@dataclass
class RmspropState:
    cache: list[np.ndarray]
    learning_rate: float = 1e-3
    rho: float = 0.9
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "RmspropState":
        return cls([np.zeros_like(p) for p in params], **hyper)


def rmsprop_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: RmspropState) -> None:
    """In-place update: cache <- rho*cache + (1-rho)*g^2;  w <- w - lr*g / (sqrt(cache) + eps)."""
    if not len(params) == len(grads) == len(state.cache):
        raise ShapeError(f"{len(params)} params, {len(grads)} grads, {len(state.cache)} cache entries")
    for w, g, c in zip(params, grads, state.cache):
        if not w.shape == g.shape == c.shape:
            raise ShapeError(f"rmsprop shape mismatch: {w.shape}, {g.shape}, {c.shape}")
        c *= state.rho
        c += (1.0 - state.rho) * (g * g)
        w -= state.learning_rate * g / (np.sqrt(c) + state.epsilon)


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 10
    seed: int = 42
    dropout: float | None = 0.5
    learning_rate: float = 1e-3
    rho: float = 0.9
    epsilon: float = 1e-8
    validation_fraction: float = 0.3
    threads: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise UsageError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise UsageError(f"validation_fraction must be in (0, 1), got {self.validation_fraction}")
        if self.threads < 1:
            raise UsageError(f"threads must be >= 1, got {self.threads}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    batch_losses: list[list[float]] = field(default_factory=list)


def write_history(path, history: TrainHistory) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
        for r in history.epochs:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_acc)])


def _stack(samples) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.cuboid.data for s in samples])
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def evaluate_loss(params: ModelParams, x: np.ndarray, y: np.ndarray, threads: int = 1) -> tuple[float, float]:
    """Mean infer-mode cross-entropy and accuracy (positive when p1 >= 0.5)."""
    probs = _map(lambda i: predict(params, x[i]), range(len(y)), threads)
    losses = [cross_entropy(p, int(label)) for p, label in zip(probs, y)]
    correct = [int(p[1] >= 0.5) == int(label) for p, label in zip(probs, y)]
    return float(np.mean(losses)), float(np.mean(correct))


def train(
    arch: dict | ModelParams,
    config: TrainConfig,
    train_set,
    val_set,
    checkpoint_path=None,
    dtype=np.float32,
) -> tuple[ModelParams, TrainHistory]:
    """Minibatch RMSprop on the softmax cross-entropy.

    ``arch`` is either an architecture config (weights initialized from
    ``config.seed``) or an already-built ModelParams to continue from.
    Each epoch draws a fresh permutation from the run generator. Per-sample
    gradients may be computed on several threads, but dropout masks are drawn
    up front and the batch gradient is reduced in ascending sample order, so
    results do not depend on ``config.threads``.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise UsageError("train and validation sets must be non-empty")
    rng = SplitMix64(config.seed)
    if isinstance(arch, ModelParams):
        params = arch.astype(dtype)
    else:
        params = ModelParams.from_config(arch, seed=rng.next_u64(), dtype=dtype)
    if config.dropout is not None:
        params = params.with_dropout(config.dropout)

    x_train, y_train = _stack(train_set)
    x_val, y_val = _stack(val_set)
    for name, x in (("train", x_train), ("validation", x_val)):
        if tuple(x.shape[1:]) != params.input_shape:
            raise ShapeError(f"{name} samples have shape {tuple(x.shape[1:])}, model expects {params.input_shape}")
    x_train = x_train.astype(dtype, copy=False)
    x_val = x_val.astype(dtype, copy=False)

    weights = params.parameters()
    state = RmspropState.for_params(
        weights, learning_rate=config.learning_rate, rho=config.rho, epsilon=config.epsilon
    )
    history = TrainHistory()
    n = len(y_train)

    def sample_grad(job):
        idx, sample_rng = job
        probs, cache = model_forward(params, x_train[idx], "train", sample_rng)
        label = int(y_train[idx])
        return cross_entropy(probs, label), model_backward(params, cache, label)

    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        batch_losses = []
        for b, start in enumerate(range(0, n, config.batch_size)):
            batch = np.sort(order[start : start + config.batch_size])
            jobs = [(int(i), rng.split()) for i in batch]
            try:
                results = _map(sample_grad, jobs, config.threads)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from exc
            total = [np.zeros_like(w) for w in weights]
            loss_sum = 0.0
            for loss, grads in results:
                loss_sum += loss
                for acc, g in zip(total, grads):
                    acc += g
            batch_loss = loss_sum / len(batch)
            if not math.isfinite(batch_loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}, batch {b}")
            scale = np.dtype(dtype).type(1.0 / len(batch))
            rmsprop_step(weights, [g * scale for g in total], state)
            batch_losses.append(batch_loss)
        val_loss, val_acc = evaluate_loss(params, x_val, y_val, config.threads)
        record = EpochRecord(epoch, float(np.mean(batch_losses)), val_loss, val_acc)
        history.epochs.append(record)
        history.batch_losses.append(batch_losses)
        log.info(
            "epoch %d: train_loss %.4f val_loss %.4f val_acc %.4f",
            epoch, record.train_loss, record.val_loss, record.val_acc,
        )

    if checkpoint_path is not None:
        write_checkpoint(checkpoint_path, params)
        write_history(Path(checkpoint_path).with_suffix(".history.csv"), history)
    return params, history
