"""
Training module for the Rivulet drop simulator.
Losses, the seeded mini-batch training loop, and near-miss class balancing.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
from imblearn.under_sampling import NearMiss

from src.exporter import write_loss_curve
from src.layers import NeuralError
from src.network import Model
from src.optimizers import Optimizer


logger = logging.getLogger(__name__)


BCE_CLAMP = 1e-7


class EmptyDataset(NeuralError, ValueError):
    """Raised when training is requested on zero samples."""
    pass


class NonFiniteLoss(NeuralError):
    """Raised when a batch loss becomes NaN or infinite."""

    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"Non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class NoPositives(NeuralError, ValueError):
    """Raised when class balancing finds no positive samples."""
    pass


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults follow the published recipe."""

    epochs: int = 1000
    batch_size: int = 128
    lr: float = 1e-2
    lr_decay: float = 1e-6
    optimizer: str = 'sgd_nesterov'
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: str = 'mse'
    seed: int = 0

    def validate(self) -> List[str]:
        errors = []
        if self.epochs < 0:
            errors.append(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            errors.append(f"lr must be >= 0, got {self.lr}")
        if self.lr_decay < 0:
            errors.append(f"lr_decay must be >= 0, got {self.lr_decay}")
        if self.optimizer not in ('sgd_nesterov', 'adam'):
            errors.append(f"Unknown optimizer: {self.optimizer}")
        if self.loss not in ('mse', 'bce'):
            errors.append(f"Unknown loss: {self.loss}")
        return errors


@dataclass
class TrainResult:
    model: Model
    losses: List[float] = field(default_factory=list)
    accuracies: List[float] = field(default_factory=list)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to ``pred``."""
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def bce_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Binary cross-entropy on sigmoid outputs clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = -np.mean(target * np.log(p) + (1.0 - target) * np.log(1.0 - p))
    grad = (p - target) / (p * (1.0 - p)) / p.size
    return float(loss), grad


LOSSES = {'mse': mse_loss, 'bce': bce_loss}


def balanced_accuracy(model: Model, X: np.ndarray, y: np.ndarray) -> float:
    """Mean of per-class recall with the strict > 0.5 decision rule."""
    pred = model.predict(X).reshape(-1) > 0.5
    truth = np.asarray(y).reshape(-1) > 0.5
    recalls = [np.mean(pred[truth == cls] == cls) for cls in (True, False) if np.any(truth == cls)]
    return float(np.mean(recalls)) if recalls else 0.0


def train(model: Model, X: np.ndarray, Y: np.ndarray, cfg: TrainConfig,
          loss_path: Optional[Union[str, Path]] = None,
          on_epoch: Optional[Callable[[int, float], None]] = None,
          track_accuracy: bool = False) -> TrainResult:
    """
    Seeded mini-batch training.

    Samples are reshuffled every epoch by a generator seeded from
    ``cfg.seed``; dropout masks come from an independent stream of the same
    seed, so identical inputs produce identical weights.

    Args:
        model: Model to train in place
        X: Inputs, shaped for ``model.forward``
        Y: Targets, shaped like the model output
        cfg: Hyperparameters
        loss_path: Optional CSV file for the "epoch,loss" curve
        on_epoch: Optional callback receiving (epoch, loss)
        track_accuracy: Record balanced accuracy per epoch (classifiers)

    Returns:
        TrainResult with the model and per-epoch losses

    Raises:
        EmptyDataset: If X has no samples
        NonFiniteLoss: If any batch loss is NaN or infinite
    """
    errors = cfg.validate()
    if errors:
        raise ValueError("; ".join(errors))
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n = len(X)
    if n == 0:
        raise EmptyDataset("Cannot train on an empty dataset")
    Y = Y.reshape(n, -1)

    shuffle_seq, dropout_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    loss_fn = LOSSES[cfg.loss]
    optimizer = Optimizer(cfg.optimizer, cfg.lr, cfg.lr_decay, cfg.momentum, cfg.beta1, cfg.beta2, cfg.eps)
    result = TrainResult(model)

    logger.info(f"Training '{model.net}' on {n} samples for {cfg.epochs} epochs "
                f"(batch={cfg.batch_size}, lr={cfg.lr}, optimizer={cfg.optimizer})")

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for batch, start in enumerate(range(0, n, cfg.batch_size), start=1):
            idx = order[start:start + cfg.batch_size]
            out, cache = model.forward(X[idx], train=True, rng=dropout_rng)
            loss, dout = loss_fn(out, Y[idx])
            if not np.isfinite(loss):
                logger.error(f"Training '{model.net}' diverged at epoch {epoch}, batch {batch}")
                raise NonFiniteLoss(epoch, batch, loss)
            grads, _ = model.backward(dout, cache)
            optimizer.step(model.parameters(), grads)
            total += loss * len(idx)

        epoch_loss = total / n
        result.losses.append(epoch_loss)
        if track_accuracy:
            result.accuracies.append(balanced_accuracy(model, X, Y))
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)
        if epoch == 1 or epoch % 50 == 0 or epoch == cfg.epochs:
            logger.info(f"Epoch {epoch}/{cfg.epochs}: loss={epoch_loss:.6e}")

    if loss_path is not None:
        write_loss_curve(result.losses, loss_path)
    return result


def near_miss_undersample(samples: np.ndarray, labels: np.ndarray, ratio: float = 1.0,
                          n_neighbors: int = 3) -> np.ndarray:
    """
    NearMiss-1 balancing of negatives against positives.

    All positives are kept. Negatives are ranked by their mean Euclidean
    distance to their nearest positives and the closest
    ``round(ratio * positives)`` are kept.

    Args:
        samples: Feature matrix (n, d)
        labels: Binary labels (n,)
        ratio: Negatives kept per positive
        n_neighbors: Positives averaged per negative

    Returns:
        Sorted indices of the retained samples

    Raises:
        NoPositives: If there is no positive sample
    """
    X = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    y = (np.asarray(labels).reshape(-1) > 0.5).astype(int)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0:
        raise NoPositives("Near-miss balancing needs at least one positive sample")

    target = int(round(ratio * n_pos))
    if n_neg <= target:
        logger.info(f"Already balanced: {n_pos} positives, {n_neg} negatives kept")
        return np.arange(len(y))

    sampler = NearMiss(sampling_strategy={0: target}, version=1, n_neighbors=min(n_neighbors, n_pos))
    sampler.fit_resample(X, y)
    kept = np.sort(sampler.sample_indices_)
    logger.info(f"Near-miss balancing: {n_pos} positives, {n_neg} -> {target} negatives")
    return kept
