"""Mini-batch training with Adam."""
from __future__ import annotations

import logging
import time
from typing import Callable, Optional

from . import nn
from .data import Dataset, TrainConfig, make_batches
from .metrics import EpochRecord, TrainingHistory, accuracy, confusion
from .model import Model, prepare_input

log = logging.getLogger(__name__)


def fit(model: Model, train: Dataset, config: TrainConfig = TrainConfig(), val: Optional[Dataset] = None,
        on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainingHistory:
    """Train ``model`` in place for ``config.epochs`` epochs.

    Batch order depends on ``(config.seed, model.epoch)``, so resuming a model
    continues the shuffle sequence instead of repeating it.  ``train_loss`` and
    ``train_accuracy`` are averaged over the epoch's batches as they were seen.
    """
    if model.optimizer is None:
        model.optimizer = nn.AdamState.fresh(model.parameters())
    params = model.parameters()
    history = TrainingHistory()
    for _ in range(config.epochs):
        t0 = time.perf_counter()
        loss_sum, correct, seen = 0.0, 0, 0
        for images, labels in make_batches(train, config, model.epoch):
            x = prepare_input(model, images, batched=True)
            loss, probs, grads = model.loss_and_grads(x, labels)
            nn.adam_step(params, [g for layer_grads in grads for g in layer_grads], model.optimizer)
            loss_sum += loss * len(labels)
            correct += int((probs.argmax(axis=1) == labels).sum())
            seen += len(labels)
        val_acc = accuracy(confusion(model, val)) if val is not None and len(val) else None
        record = EpochRecord(model.epoch + 1, loss_sum / seen, correct / seen, val_acc, time.perf_counter() - t0)
        model.epoch += 1
        history.append(record)
        log.info("epoch %d loss %.4f train_acc %.4f val_acc %s", record.epoch, record.train_loss,
                 record.train_accuracy, "-" if val_acc is None else f"{val_acc:.4f}")
        if on_epoch is not None:
            on_epoch(record)
    return history

