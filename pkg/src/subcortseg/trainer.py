"""Mini-batch training with a validation split and early stopping.

One random stream drives everything, drawn in a fixed order: first the
train/validation shuffle, then one permutation of the training set per
epoch.  Training is therefore a pure function of the initial model, the
sample set and the configuration.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor as T
from .errors import NonFiniteLoss, TooFewSamples

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs_max: int = 200
    batch_size: int = 128
    patience: int = 20
    val_fraction: float = 0.25
    seed: int = 0
    adam: T.AdamConfig = field(default_factory=T.AdamConfig)

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.patience < 1 or self.epochs_max < 1:
            raise ValueError("batch_size, patience and epochs_max must be >= 1")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    val_acc: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def best_val_acc(self) -> float:
        return self.records[self.best_epoch - 1].val_acc if self.best_epoch else float("nan")

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"epoch": r.epoch, "loss": r.loss, "val_acc": r.val_acc}) + "\n"
                       for r in self.records)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())


class EarlyStopping:
    """Track the best validation accuracy; epochs are numbered from 1.

    Calling the instance with an epoch's accuracy returns True when training
    should stop, i.e. ``patience`` epochs have passed without a strict
    improvement.  Ties keep the earlier epoch.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best_epoch = 0
        self.best_score = -math.inf

    def improved(self, epoch: int, score: float) -> bool:
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            return True
        return False

    def __call__(self, epoch: int, score: float) -> bool:
        self.improved(epoch, score)
        return epoch - self.best_epoch >= self.patience


def split_train_val(samples, val_fraction: float, rng) -> tuple:
    """Shuffle and split; the first ceil((1 - val_fraction) * N) go to training.

    ``rng`` is a seed or a ``numpy.random.Generator``.  Returns index arrays
    ``(train, val)`` into ``samples``.
    """
    n = len(samples)
    if n < 2:
        raise TooFewSamples(f"need at least 2 samples, got {n}")
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    rng = np.random.default_rng(rng)
    order = rng.permutation(n)
    # guard against (1 - 0.25) * N landing a hair above an integer
    n_train = min(max(math.ceil(round((1.0 - val_fraction) * n, 9)), 1), n - 1)
    return order[:n_train], order[n_train:]


def accuracy(params: M.ModelParams, samples, indices, batch_size: int) -> float:
    """Fraction of ``samples[indices]`` whose argmax prediction equals the label."""
    correct = 0
    for s in range(0, len(indices), batch_size):
        patches, priors, labels = samples.batch(indices[s:s + batch_size])
        scores = M.logits(params, patches, priors).values
        correct += int(np.sum(scores.argmax(axis=1) == labels))
    return correct / len(indices)


def train(model: M.ModelParams, samples, config: TrainConfig = TrainConfig(),
          history_path=None) -> tuple:
    """Train ``model`` in place; return ``(best_params, history)``.

    ``best_params`` is a copy of the parameters from the epoch with the
    highest validation accuracy.  ``samples`` is a :class:`SampleSet`.
    """
    if len(samples) == 0:
        raise TooFewSamples("no training samples")
    rng = np.random.default_rng(config.seed)
    train_idx, val_idx = split_train_val(samples, config.val_fraction, rng)
    log.info("training on %d samples, validating on %d", len(train_idx), len(val_idx))

    history = TrainHistory()
    stopper = EarlyStopping(config.patience)
    best = model.copy()
    for epoch in range(1, config.epochs_max + 1):
        started = time.perf_counter()
        order = train_idx[rng.permutation(len(train_idx))]
        total = 0.0
        for s in range(0, len(order), config.batch_size):
            batch = order[s:s + config.batch_size]
            patches, priors, labels = samples.batch(batch)
            loss, _ = T.softmax_cross_entropy(M.logits(model, patches, priors), labels)
            value = float(loss.values)
            if not math.isfinite(value):
                raise NonFiniteLoss(f"loss became {value} at epoch {epoch}, batch starting {s}")
            loss.backward()
            for layer in model.layers:
                T.adam_step(layer, config.adam)
            total += value * len(batch)

        val_acc = accuracy(model, samples, val_idx, config.batch_size)
        record = EpochRecord(epoch, total / len(order), val_acc)
        history.records.append(record)
        if stopper.improved(epoch, val_acc):
            best = model.copy()
        history.best_epoch = stopper.best_epoch
        log.info("epoch %d: loss %.4f, val_acc %.4f (best %d) [%.0fs]", epoch, record.loss,
                 val_acc, stopper.best_epoch, time.perf_counter() - started)
        if history_path is not None:
            history.write_jsonl(history_path)
        if epoch - stopper.best_epoch >= config.patience:
            history.stopped_early = epoch < config.epochs_max
            break

    best.metadata.update(epochs_run=len(history.records), best_epoch=history.best_epoch,
                         best_val_acc=history.best_val_acc)
    return best, history
