"""SGD training loop with Nesterov momentum, the ascending learning-rate
schedule, accuracy-threshold early stopping, patience, and best-checkpoint
saving.

The schedule *divides* by lr_drop^floor((1+epoch)/epochs_drop), so the rate
rises over time; where a cap is configured, exceeding it resets the rate to
1e-4. Mini-batches follow a seeded shuffle and the last partial batch is
dropped, mirroring steps_per_epoch = n // batch_size.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import models
from .dataset import shuffled_epoch_order
from .errors import EmptyDataset, InvalidConfig, ShapeMismatch
from .losses import LOSS_NAMES, batch_loss
from .serialize import save_model

LR_RESET = 1e-4  # rate applied when the cap fires


@dataclass
class TrainConfig:
    init_lr: float = 0.0001
    lr_drop: float = 0.96
    epochs_drop: int = 7
    lr_cap: float | None = None  # 0.0009 in the transfer-learning setup
    momentum: float = 0.9
    nesterov: bool = True
    batch_size: int = 50
    val_batch_size: int = 2
    max_epochs: int = 400
    early_stop_value: float = 0.999
    patience: int = 50
    loss: str = "hinge"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.lr_drop < 1.0:
            raise InvalidConfig(f"lr_drop must be in (0, 1), got {self.lr_drop}")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidConfig(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.val_batch_size < 1:
            raise InvalidConfig("batch sizes must be >= 1")
        if self.epochs_drop < 1:
            raise InvalidConfig("epochs_drop must be >= 1")
        if self.loss not in LOSS_NAMES:
            raise InvalidConfig(f"loss must be one of {LOSS_NAMES}, got {self.loss!r}")


def transfer_head_config(**overrides) -> TrainConfig:
    """Defaults used when training the binary heads (epochs_drop 8, capped)."""
    base = dict(
        epochs_drop=8, lr_cap=0.0009, max_epochs=300, early_stop_value=0.95, patience=40
    )
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    lr: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_val_acc: float = -1.0
    best_epoch: int = -1
    stop_reason: str = ""  # threshold | patience | max_epochs

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainHistory":
        history = cls()
        for line in text.splitlines():
            if line.strip():
                history.records.append(EpochRecord(**json.loads(line)))
        if history.records:
            best = max(history.records, key=lambda r: r.val_acc)
            history.best_val_acc = best.val_acc
            history.best_epoch = best.epoch
        return history


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    exponent = math.floor((1 + epoch) / cfg.epochs_drop)
    lr = cfg.init_lr / cfg.lr_drop ** exponent
    if cfg.lr_cap is not None and lr > cfg.lr_cap:
        lr = LR_RESET
    return lr


def sgd_nesterov_step(param, grad, velocity, lr, momentum, nesterov=True):
    """One update: v' = m*v - lr*g; with Nesterov the parameter adds the
    lookahead m*v' - lr*g, otherwise just v'. Returns (param', velocity')."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ShapeMismatch(
            f"param {param.shape}, grad {grad.shape}, velocity {velocity.shape} must agree"
        )
    new_velocity = momentum * velocity - lr * grad
    if nesterov:
        new_param = param + momentum * new_velocity - lr * grad
    else:
        new_param = param + new_velocity
    return new_param, new_velocity


def _one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], k), dtype=np.float32)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _trainable_names(model) -> list:
    names = []
    for spec in model.specs:
        names.extend(models.trainable_param_names(spec))
    return names


class SgdState:
    """Per-parameter velocities for one model."""

    def __init__(self, model):
        self.velocity = {
            name: np.zeros_like(model.weights[name]) for name in _trainable_names(model)
        }

    def apply(self, model, grads, lr, momentum, nesterov):
        for name in self.velocity:
            if name not in grads:
                continue
            model.weights[name], self.velocity[name] = sgd_nesterov_step(
                model.weights[name],
                grads[name].astype(model.weights[name].dtype),
                self.velocity[name],
                lr,
                momentum,
                nesterov,
            )


def train_epoch(model, images, labels, cfg: TrainConfig, epoch_index: int, rng, state=None):
    """One pass over shuffled mini-batches (last partial batch dropped).

    Returns (train_loss, train_acc) averaged over the batches actually run.
    """
    n = images.shape[0]
    if n == 0:
        raise EmptyDataset("no training samples")
    steps = n // cfg.batch_size
    if steps == 0:
        raise EmptyDataset(f"{n} samples cannot fill one batch of {cfg.batch_size}")
    state = state if state is not None else SgdState(model)
    k = model.output_shape[0]
    lr = lr_schedule(epoch_index, cfg)
    order = shuffled_epoch_order(n, cfg.seed, epoch_index)

    total_loss = 0.0
    correct = 0
    seen = 0
    for step in range(steps):
        idx = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
        batch = images[idx]
        targets = _one_hot(labels[idx], k)
        out, tape = models.forward(model, batch, mode="train", rng=rng, record=True)
        lv = batch_loss(cfg.loss, out, targets)
        grads, _ = models.backward(model, tape, lv.grad.astype(out.dtype), mode="train")
        state.apply(model, grads, lr, cfg.momentum, cfg.nesterov)
        total_loss += lv.value * batch.shape[0]
        correct += int((out.argmax(axis=1) == labels[idx]).sum())
        seen += batch.shape[0]
    return total_loss / seen, correct / seen


def evaluate_accuracy(model, images, labels, batch_size=64) -> float:
    """Infer-mode accuracy over the full set."""
    if images.shape[0] == 0:
        raise EmptyDataset("no validation samples")
    out = models.predict(model, images, batch_size=batch_size)
    return float((out.argmax(axis=1) == labels).mean())


def fit_binary_pair(model, train_set, val_set, a: int, b: int, cfg: TrainConfig, checkpoint=None):
    """Restrict both (images, labels) splits to stages {a, b}, remap a -> 0 and
    b -> 1, and fit the binary model."""

    def restrict(images, labels):
        keep = (labels == a) | (labels == b)
        if not keep.any():
            raise EmptyDataset(f"no samples for stage pair ({a}, {b})")
        return images[keep], (labels[keep] == b).astype(np.int64)

    return fit(model, restrict(*train_set), restrict(*val_set), cfg, checkpoint)


def fit(
    model,
    train_set,
    val_set,
    cfg: TrainConfig,
    checkpoint_path=None,
    evaluate_fn=None,
) -> TrainHistory:
    """Run the epoch loop with checkpointing and early stopping.

    train_set/val_set are (images, labels) pairs. A checkpoint is written
    whenever validation accuracy strictly improves. Stops when val accuracy
    reaches early_stop_value, when it fails to improve for `patience`
    consecutive epochs, or at max_epochs. evaluate_fn may replace the
    validation metric (used by tests to script the metric sequence).
    """
    train_images, train_labels = train_set
    val_images, val_labels = val_set
    if train_images.shape[0] == 0 or val_images.shape[0] == 0:
        raise EmptyDataset("training and validation sets must be non-empty")
    if evaluate_fn is None:
        evaluate_fn = lambda m, epoch: evaluate_accuracy(
            m, val_images, val_labels, cfg.val_batch_size
        )

    rng = np.random.default_rng(cfg.seed)
    state = SgdState(model)
    history = TrainHistory()
    stale = 0
    for epoch in range(cfg.max_epochs):
        train_loss, train_acc = train_epoch(
            model, train_images, train_labels, cfg, epoch, rng, state
        )
        val_acc = float(evaluate_fn(model, epoch))
        history.records.append(
            EpochRecord(epoch, float(train_loss), float(train_acc), val_acc, lr_schedule(epoch, cfg))
        )
        if val_acc > history.best_val_acc:
            history.best_val_acc = val_acc
            history.best_epoch = epoch
            stale = 0
            if checkpoint_path is not None:
                save_model(model, checkpoint_path)
        else:
            stale += 1
        if val_acc >= cfg.early_stop_value:
            history.stop_reason = "threshold"
            break
        if stale >= cfg.patience:
            history.stop_reason = "patience"
            break
    else:
        history.stop_reason = "max_epochs"
    return history
