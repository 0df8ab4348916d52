"""Shared training loop used by the gradual-freezing schedule and every
baseline strategy.

One engine drives optimizer steps, epoch-mean gradient bookkeeping for the
relative gradient norms, validation metrics, early stopping, and the
per-epoch records; strategy controllers only decide freeze flags, learning
rates, and optional loss penalties. Data order and augmentation draws
depend only on (seed, epoch), so runs with the same seed see identical
batches regardless of strategy.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, backpropagate
from .data import augment
from .metrics import PredictionSet, mean_average_precision, mean_roc_auc, per_class_ap
from .nn import ConfigError, Model, predict_scores, set_base_lr
from .optim import AdamState, adam_step, updated_param_count
from .scheduler import compute_rgn

# named sub-streams hanging off one master seed
_STREAMS = {"data": 1, "augment": 2, "classifier": 3, "init": 4}


def seed_stream(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, _STREAMS[name]))))


@dataclass
class SplitData:
    """Train/val/test arrays for one task."""

    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray | None = None
    test_y: np.ndarray | None = None

    def __post_init__(self):
        if self.train_x.shape[0] == 0 or self.val_x.shape[0] == 0:
            raise ConfigError("training: empty train or validation split")


@dataclass
class MetricsRecord:
    """Everything observed during one completed epoch."""

    epoch: int
    phase: str
    train_loss: float
    val_map: float
    val_auc: float
    per_class_ap: list[float | None]
    trainable_layer_count: int
    layer_trained: list[bool]
    rgn: list[float]
    alpha: list[float]
    effective_lr: list[float]
    cumulative_updated_params: int


class EarlyStopping:
    """Strict-improvement patience counter on a validation metric."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigError("early stopping: patience must be >= 1")
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.count = 0

    def update(self, epoch: int, value: float) -> bool:
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            self.count = 0
            return True
        self.count += 1
        return False

    def should_stop(self) -> bool:
        return self.count >= self.patience


def _one_epoch(model, splits, state, controller, *, batch_size, rng_data, rng_aug, use_augment):
    """Train all batches of one epoch; returns (mean loss, updated-param count,
    epoch-mean gradients written into the parameter grad buffers)."""
    n = splits.train_x.shape[0]
    perm = rng_data.permutation(n)
    losses = []
    updated = 0
    n_batches = 0
    grad_acc: dict[int, np.ndarray] = {}
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        xb = splits.train_x[idx]
        if use_augment:
            xb = np.stack([augment(img, rng_aug) for img in xb])
        x = Tensor(xb)
        y = Tensor(splits.train_y[idx].astype(np.float32))
        model.zero_grads()
        tape = Tape()
        logits = model.forward(tape, x)
        loss = tape.bce_with_logits(logits, y)
        penalty = controller.penalty(tape, model)
        if penalty is not None:
            loss = tape.add(loss, penalty)
        backpropagate(tape, loss)
        for layer in model.layers:
            if layer.frozen:
                continue
            for p in layer.params:
                if p.grad is None:
                    continue
                acc = grad_acc.get(id(p))
                if acc is None:
                    grad_acc[id(p)] = p.grad.astype(np.float64)
                else:
                    acc += p.grad
        adam_step(model, state)
        updated += updated_param_count(model)
        losses.append(float(loss.data))
        n_batches += 1
    # leave the epoch-mean gradient in the grad buffers for the RGN pass
    for layer in model.layers:
        for p in layer.params:
            acc = grad_acc.get(id(p))
            if acc is not None:
                p.grad = (acc / n_batches).astype(np.float32)
    return float(np.mean(losses)), updated


def evaluate(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 64):
    scores = predict_scores(model, x, batch_size)
    preds = PredictionSet(scores=scores, labels=y)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return mean_average_precision(preds), mean_roc_auc(preds), per_class_ap(preds)


def run_training(model: Model, splits: SplitData, controller, *, config, seed: int,
                 epoch_callback=None) -> list[MetricsRecord]:
    """Drive one full training run under a strategy controller.

    Stops at the epoch cap, or once the validation mAP has gone `patience`
    consecutive epochs without strict improvement (where the controller
    permits early stopping, e.g. not during pre-conditioning).
    """
    set_base_lr(model, config.base_lr)
    controller.on_run_start(model)
    state = AdamState.for_model(model)
    stopper = EarlyStopping(config.patience)
    rng_data = seed_stream(seed, "data")
    rng_aug = seed_stream(seed, "augment")
    records: list[MetricsRecord] = []
    cumulative_updates = 0

    for epoch in range(1, config.max_epochs + 1):
        phase = controller.phase(epoch)
        trained_flags = [not l.frozen for l in model.layers]
        lrs_used = [l.effective_lr for l in model.layers]
        train_loss, updated = _one_epoch(
            model, splits, state, controller,
            batch_size=config.batch_size, rng_data=rng_data, rng_aug=rng_aug,
            use_augment=config.augment,
        )
        if not math.isfinite(train_loss):
            raise FloatingPointError(f"training diverged: non-finite loss at epoch {epoch}")
        cumulative_updates += updated
        rgn = compute_rgn(model)
        controller.on_epoch_end(model, epoch, rgn)
        alpha = getattr(controller, "last_alpha", None)
        if alpha is None:
            alpha = getattr(getattr(controller, "state", None), "alpha", None)
        val_map, val_auc, class_ap = evaluate(model, splits.val_x, splits.val_y, config.batch_size)
        record = MetricsRecord(
            epoch=epoch,
            phase=phase,
            train_loss=train_loss,
            val_map=val_map,
            val_auc=val_auc,
            per_class_ap=class_ap,
            trainable_layer_count=sum(trained_flags),
            layer_trained=trained_flags,
            rgn=[float(r) for r in rgn],
            alpha=[float(a) for a in alpha] if alpha is not None else [0.0] * len(model.layers),
            effective_lr=lrs_used,
            cumulative_updated_params=cumulative_updates,
        )
        records.append(record)
        if epoch_callback is not None:
            epoch_callback(model, record)
        stopper.update(epoch, val_map)
        if controller.allow_early_stop(epoch) and stopper.should_stop():
            break
    return records
