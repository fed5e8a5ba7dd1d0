"""Training losses with analytic gradients.

Each single-sample loss takes a rank-1 prediction and a rank-1 target of the
same length and returns a LossValue (scalar + gradient w.r.t. the prediction).
batch_loss applies a named loss row-wise to rank-2 arrays, averaging the value
and scaling gradients so they are exact for the batch mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateNorm, InvalidConfig, ShapeMismatch

LOSS_NAMES = ("hinge", "cosine", "cross_entropy", "mse")


@dataclass
class LossValue:
    value: float
    grad: np.ndarray


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1:
        raise ShapeMismatch("loss operands must be rank-1 vectors")
    if x.shape != y.shape:
        raise ShapeMismatch(f"prediction length {x.shape[0]} != target length {y.shape[0]}")
    if x.size == 0:
        raise ShapeMismatch("loss operands must be non-empty")
    return x, y


def mse_loss(x, y) -> LossValue:
    """Mean squared error over the vector entries."""
    x, y = _check_pair(x, y)
    n = x.shape[0]
    diff = x - y
    return LossValue(float(diff @ diff / n), 2.0 * diff / n)


def cross_entropy_loss(x, y) -> LossValue:
    """Softmax cross entropy on logits; gradient is softmax(x) - y."""
    x, y = _check_pair(x, y)
    shifted = x - x.max()
    lse = np.log(np.exp(shifted).sum())
    log_p = shifted - lse
    p = np.exp(log_p)
    return LossValue(float(-(y * log_p).sum()), p - y)


def multilabel_loss(x, y) -> LossValue:
    """Per-entry sigmoid cross entropy for independent binary targets."""
    x, y = _check_pair(x, y)
    # log sigma(x) = -softplus(-x), log(1 - sigma(x)) = -softplus(x)
    softplus = np.logaddexp(0.0, x)
    value = (y * (softplus - x) + (1.0 - y) * softplus).sum()
    sigma = 1.0 / (1.0 + np.exp(-x))
    return LossValue(float(value), sigma - y)


def hinge_loss(pred, y) -> LossValue:
    """Mean hinge loss with the one-hot target mapped to +/-1 per class."""
    pred, y = _check_pair(pred, y)
    n = pred.shape[0]
    t = 2.0 * y - 1.0
    margins = 1.0 - t * pred
    violated = margins > 0
    value = np.where(violated, margins, 0.0).mean()
    grad = np.where(violated, -t / n, 0.0)
    return LossValue(float(value), grad)


def cosine_loss(pred, y) -> LossValue:
    """One minus the cosine similarity between the target and the prediction."""
    pred, y = _check_pair(pred, y)
    norm = float(np.linalg.norm(pred))
    if norm == 0.0:
        raise DegenerateNorm("prediction vector has zero norm")
    sim = float(y @ pred) / norm
    grad = -y / norm + sim * pred / (norm * norm)
    return LossValue(1.0 - sim, grad)


_SINGLE = {
    "mse": mse_loss,
    "cross_entropy": cross_entropy_loss,
    "hinge": hinge_loss,
    "cosine": cosine_loss,
}


def batch_loss(name, pred, target) -> LossValue:
    """Batch-mean loss over rank-2 (n, k) predictions and targets."""
    if name not in _SINGLE:
        raise InvalidConfig(f"unknown loss {name!r}; expected one of {sorted(_SINGLE)}")
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2:
        raise ShapeMismatch(f"batch loss needs matching (n, k) arrays, got {pred.shape} and {target.shape}")
    n = pred.shape[0]
    total = 0.0
    grad = np.empty_like(pred)
    for i in range(n):
        lv = _SINGLE[name](pred[i], target[i])
        total += lv.value
        grad[i] = lv.grad / n
    return LossValue(total / n, grad)
