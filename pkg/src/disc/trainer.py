"""Supervised training: the offline early-stopping protocol, the online
single-epoch regime, and evaluation.

Offline protocol: start at ``lr0``; after every epoch measure validation
accuracy in eval mode. Five epochs without a strict improvement divide the
learning rate by 3; when the patience runs out after the third drop, training
stops and the best validation checkpoint is returned.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .domains import Split
from .errors import ConfigError, DataError
from .tensor_nn import Model, loss_and_backward, sgd_step, softmax_cross_entropy

Filter = Callable[[str], bool]


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    batch_size: int = 16
    patience: int = 5
    lr_factor: float = 3.0
    max_lr_drops: int = 3
    max_epochs: int = 200
    regime: str = "offline"
    seed: int = 0

    def __post_init__(self):
        if self.regime not in ("offline", "online"):
            raise ConfigError(f"regime must be 'offline' or 'online', got {self.regime!r}")
        if not self.lr0 > 0 or not self.lr_factor > 0:
            raise ConfigError("lr0 and lr_factor must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm needs a batch)")
        if self.patience < 1 or self.max_lr_drops < 0 or self.max_epochs < 1:
            raise ConfigError("patience and max_epochs must be >= 1, max_lr_drops >= 0")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_acc: float
    lr: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    stop_reason: str = ""
    steps: int = 0
    final_lr: float = 0.0
    best_epoch: int = 0

    @property
    def lr_trace(self) -> list[float]:
        return [e.lr for e in self.epochs]

    @property
    def val_trace(self) -> list[float]:
        return [e.val_acc for e in self.epochs]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "loss", "val_acc", "lr"])
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.loss), repr(e.val_acc), repr(e.lr)])


class EarlyStopping:
    """Learning-rate / stopping state machine of the offline protocol.

    Call ``update(val_acc)`` after every epoch. It returns ``"improved"``,
    ``"wait"``, ``"drop"`` (the lr was divided) or ``"stop"``.
    """

    def __init__(self, lr0: float, patience: int = 5, factor: float = 3.0, max_drops: int = 3):
        self.lr = lr0
        self.patience = patience
        self.factor = factor
        self.max_drops = max_drops
        self.best = -math.inf
        self.bad_epochs = 0
        self.drops = 0
        self.stopped = False

    def update(self, val_acc: float) -> str:
        if self.stopped:
            raise RuntimeError("early stopping already fired")
        if val_acc > self.best:
            self.best = val_acc
            self.bad_epochs = 0
            return "improved"
        self.bad_epochs += 1
        if self.bad_epochs < self.patience:
            return "wait"
        self.bad_epochs = 0
        if self.drops < self.max_drops:
            self.drops += 1
            self.lr /= self.factor
            return "drop"
        self.stopped = True
        return "stop"


def _check_split(split: Split, name: str) -> None:
    if split is None or len(split) == 0:
        raise DataError(f"{name} split is empty")


def _frozen_layers(model: Model, trainable_filter: Filter | None) -> frozenset[str]:
    """BN layers outside the trainable set run with fixed statistics."""
    if trainable_filter is None:
        return frozenset()
    return frozenset(l.key for l in model.bn_layers if not trainable_filter(l.key))


def _trainable_start(model: Model, trainable_filter: Filter | None) -> int:
    """Index of the first layer whose parameters are trained."""
    if trainable_filter is None:
        return 0
    for i, layer in enumerate(model.layers):
        if layer.params and trainable_filter(layer.key):
            return i
    return len(model.layers)


class _EpochRunner:
    """Runs SGD epochs; precomputes frozen-prefix features when possible.

    If every layer before the first trainable one is frozen (and therefore
    behaves as in eval mode), their output is a fixed function of the input
    and is computed once.
    """

    def __init__(self, model: Model, split: Split, batch_size: int, trainable_filter: Filter | None):
        self.model = model
        self.split = split
        self.batch_size = batch_size
        self.filter = trainable_filter
        self.frozen = _frozen_layers(model, trainable_filter)
        self.start = _trainable_start(model, trainable_filter)
        self.features = None
        prefix = model.layers[: self.start]
        if self.start > 0 and all(l.key in self.frozen for l in prefix if l.kind == "bn"):
            was_training = model.training
            model.eval()
            self.features = np.concatenate(
                [
                    model.run(split.images[i : i + 256].astype(model.dtype), stop=self.start)
                    for i in range(0, len(split), 256)
                ]
            )
            model.training = was_training

    def epoch(self, lr: float, rng: np.random.Generator) -> tuple[float, int]:
        model, n = self.model, len(self.split)
        model.train()
        order = rng.permutation(n)
        losses, steps = [], 0
        for i in range(0, n, self.batch_size):
            idx = order[i : i + self.batch_size]
            if len(idx) < 2:
                continue  # a single leftover sample cannot form a BN batch
            labels = self.split.labels[idx]
            if self.features is not None:
                caches: list = []
                logits = model.run(self.features[idx], start=self.start, frozen=self.frozen, caches=caches)
                loss, dlogits = softmax_cross_entropy(logits, labels)
                grads = model.backward(dlogits, caches, start=self.start, needed=self.filter)
            else:
                loss, grads = loss_and_backward(
                    model, self.split.images[idx], labels, trainable_filter=self.filter, frozen=self.frozen
                )
            sgd_step(model, grads, lr, self.filter)
            losses.append(loss)
            steps += 1
        return float(np.mean(losses)) if losses else float("nan"), steps


def train_offline(
    model: Model,
    train: Split,
    val: Split,
    cfg: TrainConfig = TrainConfig(),
    trainable_filter: Filter | None = None,
    *,
    progress: Callable[[EpochRecord], None] | None = None,
) -> tuple[Model, TrainLog]:
    _check_split(train, "train")
    _check_split(val, "validation")
    rng = np.random.default_rng(cfg.seed)
    stopper = EarlyStopping(cfg.lr0, cfg.patience, cfg.lr_factor, cfg.max_lr_drops)
    runner = _EpochRunner(model, train, cfg.batch_size, trainable_filter)
    log = TrainLog()
    best = model.copy()
    for epoch in range(1, cfg.max_epochs + 1):
        lr = stopper.lr
        loss, steps = runner.epoch(lr, rng)
        log.steps += steps
        val_acc = evaluate(model, val)["accuracy"]
        record = EpochRecord(epoch, loss, val_acc, lr)
        log.epochs.append(record)
        if progress:
            progress(record)
        if not np.isfinite(loss):
            log.stop_reason = "non-finite loss"
            break
        action = stopper.update(val_acc)
        if action == "improved":
            best = model.copy()
            log.best_epoch = epoch
        elif action == "stop":
            log.stop_reason = f"no improvement after {cfg.max_lr_drops} learning-rate drops"
            break
    else:
        log.stop_reason = f"reached max_epochs={cfg.max_epochs}"
    log.final_lr = log.epochs[-1].lr
    model.load_state(best)
    model.eval()
    return model, log


def train_online(
    model: Model,
    train: Split,
    cfg: TrainConfig = TrainConfig(regime="online"),
    trainable_filter: Filter | None = None,
    *,
    lr: float | None = None,
) -> tuple[Model, TrainLog]:
    """A single seeded epoch at ``lr`` (defaults to ``cfg.lr0``)."""
    _check_split(train, "train")
    lr = cfg.lr0 if lr is None else lr
    rng = np.random.default_rng(cfg.seed)
    loss, steps = _EpochRunner(model, train, cfg.batch_size, trainable_filter).epoch(lr, rng)
    log = TrainLog([EpochRecord(1, loss, float("nan"), lr)], "single online epoch", steps, lr, 1)
    model.eval()
    return model, log


def predict(model: Model, images: np.ndarray, batch_size: int = 250) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        preds = [
            model.run(images[i : i + batch_size].astype(model.dtype, copy=False)).argmax(axis=1)
            for i in range(0, images.shape[0], batch_size)
        ]
    finally:
        model.training = was_training
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model: Model, split: Split, n_classes: int | None = None) -> dict:
    """Accuracy, per-class recall and confusion matrix (rows = true class)."""
    _check_split(split, "evaluation")
    k = n_classes or model.config.n_classes
    preds = predict(model, split.images)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (split.labels, preds), 1)
    support = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, np.diag(confusion) / np.maximum(support, 1), np.nan)
    return {
        "accuracy": float(np.trace(confusion) / confusion.sum()),
        "per_class": per_class,
        "confusion": confusion,
    }


def head_only(model: Model) -> Filter:
    head = model.head_key
    return lambda key: key == head


def nothing(key: str) -> bool:
    return False
