"""Binary cross-entropy loss, Adam, and the weighted training loop.

Day windows containing at least one labeled anomaly are up-weighted to
counter class imbalance. Validation loss is computed after every epoch and
the weights from the best epoch are the ones returned; an early-stop
patience caps wasted epochs past that point.
"""

from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from soilqc.errors import ConfigError, DataError, NumericError
from soilqc.model import ModelParams, WindowSample, forward_batch, infer_batch
from soilqc.nn import Tensor, add, add_const, clip, log, mean, mul, scale, zero_grads
from soilqc.series import STEPS_PER_DAY

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    anomaly_day_weight: float = 5.0
    batch_size: int = 32
    seed: int = 0
    early_stop_patience: int = 50

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.anomaly_day_weight <= 0:
            raise ConfigError("anomaly_day_weight must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")


def bce_loss(p: float, y: int, weight: float = 1.0) -> float:
    """Weighted binary cross-entropy for one prediction.

    p is clamped to [1e-7, 1 - 1e-7] before the logs, so the value is always
    finite and zero only at clamp-boundary perfect predictions.
    """
    p = min(max(p, PROB_CLAMP), 1.0 - PROB_CLAMP)
    return weight * -(y * math.log(p) + (1 - y) * math.log(1.0 - p))


def batch_bce(probs: Tensor, labels: np.ndarray, weights: np.ndarray) -> Tensor:
    """Mean of per-element weighted BCE, on the tape.

    probs is the (96*B, 1) timestep-major output of forward_batch; labels is
    (B, 96) boolean; weights is (B,) per-sample.
    """
    batch = labels.shape[0]
    y = labels.T.astype(np.float64).reshape(-1, 1)          # timestep-major
    w = np.tile(weights.astype(np.float64), STEPS_PER_DAY).reshape(-1, 1)

    p = clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    one_minus_p = add_const(scale(p, -1.0), 1.0)
    nll = add(mul(log(p), Tensor(-y)), mul(log(one_minus_p), Tensor(y - 1.0)))
    return mean(mul(nll, Tensor(w)))


def _batch_bce_value(grid: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> float:
    """Same weighted mean as batch_bce, straight numpy (for validation)."""
    p = np.clip(grid, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = labels.astype(np.float64)
    nll = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return float((nll * weights[:, None]).mean())


@dataclass
class AdamState:
    """First/second moment accumulators per parameter, plus the step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


def init_adam(params: Sequence[Tensor]) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
    )


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> None:
    """One bias-corrected Adam update, in place on params and state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DataError("adam_step: params, grads, and state must align")
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise DataError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient in adam_step")
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


def assign_weights(samples: Iterable[WindowSample], anomaly_day_weight: float) -> None:
    """Weight = anomaly_day_weight for days containing any labeled anomaly, else 1."""
    for s in samples:
        s.weight = anomaly_day_weight if s.has_anomaly() else 1.0


def _labeled(samples: Sequence[WindowSample]) -> list[WindowSample]:
    return [s for s in samples if s.labels is not None]


def _evaluate(model: ModelParams, samples: Sequence[WindowSample], batch_size: int) -> tuple[float, float]:
    """Weighted loss and plain timestep accuracy (threshold 0.5) over a sample set."""
    total_loss = 0.0
    total_rows = 0
    correct = 0
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo : lo + batch_size]
        grid = infer_batch(model, chunk)
        labels = np.stack([s.labels for s in chunk])
        weights = np.array([s.weight for s in chunk])
        rows = grid.size
        total_loss += _batch_bce_value(grid, labels, weights) * rows
        total_rows += rows
        correct += int(((grid >= 0.5) == labels).sum())
    return total_loss / total_rows, correct / total_rows


def train(
    model: ModelParams,
    train_samples: Sequence[WindowSample],
    val_samples: Sequence[WindowSample],
    cfg: TrainConfig,
) -> tuple[ModelParams, list[EpochStats]]:
    """Optimize in place; return the model restored to its best epoch plus history.

    Best = minimum validation loss (last epoch when the validation set is
    empty). Deterministic for a fixed config seed: shuffling comes from one
    seeded generator and batch accumulation order is fixed by sample index.
    """
    train_set = _labeled(train_samples)
    val_set = _labeled(val_samples)
    if not train_set:
        raise DataError("no labeled training data")

    assign_weights(train_set, cfg.anomaly_day_weight)
    assign_weights(val_set, cfg.anomaly_day_weight)

    params = model.parameters()
    adam = init_adam(params)
    rng = np.random.default_rng(cfg.seed)

    history: list[EpochStats] = []
    best_loss = math.inf
    best_epoch = -1
    best_snap = None

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        epoch_rows = 0
        for lo in range(0, len(order), cfg.batch_size):
            chunk = [train_set[i] for i in order[lo : lo + cfg.batch_size]]
            probs = forward_batch(model, chunk)
            labels = np.stack([s.labels for s in chunk])
            weights = np.array([s.weight for s in chunk])
            loss = batch_bce(probs, labels, weights)
            if not math.isfinite(loss.item()):
                raise NumericError(
                    f"training diverged: non-finite loss at epoch {epoch}, batch {lo // cfg.batch_size}"
                )
            zero_grads(params)
            loss.backward()
            adam_step(params, [p.grad for p in params], adam, cfg)
            epoch_loss += loss.item() * probs.data.size
            epoch_rows += probs.data.size

        train_loss = epoch_loss / epoch_rows
        if val_set:
            val_loss, val_acc = _evaluate(model, val_set, cfg.batch_size)
            if not math.isfinite(val_loss):
                raise NumericError(f"training diverged: non-finite validation loss at epoch {epoch}")
        else:
            val_loss, val_acc = math.nan, math.nan
        history.append(EpochStats(epoch, train_loss, val_loss, val_acc))

        if val_set:
            if val_loss < best_loss:
                best_loss = val_loss
                best_epoch = epoch
                best_snap = model.snapshot()
            elif epoch - best_epoch >= cfg.early_stop_patience:
                break

    if best_snap is not None:
        model.restore(best_snap)
        model.metadata["best_epoch"] = best_epoch
    else:
        model.metadata["best_epoch"] = history[-1].epoch
    model.metadata["epochs_run"] = history[-1].epoch
    return model, history


def write_history_csv(history: Sequence[EpochStats], path: str | os.PathLike) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "val_accuracy"])
            for row in history:
                writer.writerow(
                    [row.epoch, repr(row.train_loss), repr(row.val_loss), repr(row.val_accuracy)]
                )
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise
