"""Mini-batch training with binary cross-entropy and early stopping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import IO, Callable, Iterable, Sequence

import numpy as np

from oginfra.cnn.network import Network
from oginfra.dataset import load_split
from oginfra.errors import ConfigError, InputError, ShapeError, TrainingError

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7


def bce_loss(pred: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. ``pred``.

    Predictions are clipped to ``[1e-7, 1 - 1e-7]``; the gradient is zero
    where clipping is active.
    """
    pred = np.asarray(pred, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64).reshape(pred.shape)
    if not np.all((labels == 0) | (labels == 1)):
        raise InputError("labels must be 0 or 1")
    n = pred.size
    if n == 0:
        raise InputError("bce_loss of an empty batch")
    p = np.clip(pred, PROB_EPS, 1 - PROB_EPS)
    loss = -np.mean(labels * np.log(p) + (1 - labels) * np.log(1 - p))
    grad = (-labels / p + (1 - labels) / (1 - p)) / n
    grad[(pred < PROB_EPS) | (pred > 1 - PROB_EPS)] = 0.0
    return float(loss), grad


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 50
    es_min_delta: float = 0.002
    es_patience: int = 5
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.es_min_delta < 0:
            raise ConfigError(f"es_min_delta must be >= 0, got {self.es_min_delta}")
        if self.es_patience < 1:
            raise ConfigError(f"es_patience must be >= 1, got {self.es_patience}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    stopped_early: bool
    best_epoch: int


class EarlyStopping:
    """Patience counter on validation loss.

    An epoch counts as an improvement when it beats the lowest loss seen so
    far by more than ``min_delta``. The reference tracks the running minimum,
    so a slow creep of sub-threshold gains never adds up to a false
    improvement. ``best_epoch`` is the last epoch that improved.
    """

    def __init__(self, min_delta: float = 0.002, patience: int = 5):
        self.min_delta = min_delta
        self.patience = patience
        self.lowest = math.inf
        self.best_epoch = 0
        self.counter = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch; returns True if it was an improvement."""
        improved = self.lowest - val_loss > self.min_delta
        if improved:
            self.best_epoch = epoch
            self.counter = 0
        else:
            self.counter += 1
        self.lowest = min(self.lowest, val_loss)
        return improved

    @property
    def should_stop(self) -> bool:
        return self.counter >= self.patience


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: list[dict], grads: list[dict]) -> None:
        for p, g in zip(params, grads):
            for k in p:
                p[k] -= self.lr * g[k]


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: list[dict] | None = None
        self.v: list[dict] | None = None

    def step(self, params: list[dict], grads: list[dict]) -> None:
        if self.m is None:
            self.m = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
            self.v = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            for k in p:
                m[k] = self.beta1 * m[k] + (1 - self.beta1) * g[k]
                v[k] = self.beta2 * v[k] + (1 - self.beta2) * g[k] ** 2
                p[k] -= self.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + self.eps)


@dataclass
class TrainingData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray

    @classmethod
    def from_manifest(cls, manifest, root=None) -> TrainingData:
        x_tr, y_tr = load_split(manifest, "train", root)
        x_va, y_va = load_split(manifest, "val", root)
        return cls(x_tr, y_tr, x_va, y_va)


def predict(model: Network, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Sigmoid outputs, one per image."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != len(model.input_shape) + 1 or images.shape[1:] != model.input_shape:
        raise ShapeError(f"images of shape {images.shape[1:]} do not match model input {model.input_shape}")
    out = [model.forward(images[i : i + batch_size]).reshape(-1) for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


def evaluate_loss(model: Network, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """(mean BCE, accuracy at threshold 0.5) over a labeled set."""
    p = predict(model, x)
    loss, _ = bce_loss(p, y)
    acc = float(np.mean((p >= 0.5) == (y == 1)))
    return loss, acc


def _all_finite(arrays: Iterable[np.ndarray]) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)


def train(
    model: Network,
    data: TrainingData,
    cfg: TrainConfig = TrainConfig(),
    *,
    evaluate: Callable[[Network, np.ndarray, np.ndarray], tuple[float, float]] = evaluate_loss,
    callbacks: Sequence[Callable[[Network, EpochStats], None]] = (),
) -> tuple[Network, list[EpochStats]]:
    """Train in place and return the model with best-epoch weights restored.

    ``evaluate`` computes (val_loss, val_accuracy); each callback runs after
    every epoch with the live (not yet restored) model.
    """
    if len(data.x_train) == 0 or len(data.x_val) == 0:
        raise ConfigError("training needs non-empty train and validation splits")
    if not _all_finite([data.x_train, data.x_val]):
        raise InputError("training data contains non-finite values")
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(cfg.learning_rate) if cfg.optimizer == "adam" else SGD(cfg.learning_rate)
    stopper = EarlyStopping(cfg.es_min_delta, cfg.es_patience)
    best_weights = model.get_weights()
    history: list[EpochStats] = []
    n = len(data.x_train)

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            model.zero_grad()
            pred = model.forward(data.x_train[idx])
            loss, grad = bce_loss(pred, data.y_train[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite training loss in epoch {epoch}", history[-1] if history else None)
            model.backward(grad)
            optimizer.step(model.params, model.grads)
            total += loss * len(idx)
        if not _all_finite(v for p in model.params for v in p.values()):
            raise TrainingError(f"non-finite weights after epoch {epoch}", history[-1] if history else None)
        train_loss = total / n
        val_loss, val_acc = evaluate(model, data.x_val, data.y_val)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss in epoch {epoch}", history[-1] if history else None)
        if stopper.update(epoch, val_loss):
            best_weights = model.get_weights()
        stats = EpochStats(epoch, train_loss, val_loss, val_acc, stopper.should_stop, stopper.best_epoch)
        history.append(stats)
        logger.info(
            "epoch %d train_loss=%.5f val_loss=%.5f val_acc=%.4f best=%d",
            epoch, train_loss, val_loss, val_acc, stopper.best_epoch,
        )
        for cb in callbacks:
            cb(model, stats)
        if stopper.should_stop:
            break

    model.set_weights(best_weights)
    return model, history


def write_history(history: Sequence[EpochStats], dest: IO[str]) -> None:
    writer = csv.writer(dest, lineterminator="\n")
    writer.writerow(["epoch", "train_loss", "val_loss", "val_accuracy"])
    for s in history:
        writer.writerow([s.epoch, repr(s.train_loss), repr(s.val_loss), repr(s.val_accuracy)])
