"""Dense tensor conventions and validation helpers.

Tensors are plain numpy arrays, row-major (C order), rank 1..4. Rank-4
activations are laid out NHWC: (batch, height, width, channels). Model
weights and activations are float32; float64 arrays are accepted by every
kernel so numeric test oracles can run the same code at higher precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch

MAX_RANK = 4


def as_tensor(data, dtype=np.float32) -> np.ndarray:
    """Coerce to a contiguous floating array and validate the invariants."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    check_tensor(arr)
    return arr


def check_tensor(arr: np.ndarray) -> np.ndarray:
    if arr.ndim < 1 or arr.ndim > MAX_RANK:
        raise ShapeMismatch(f"rank {arr.ndim} outside 1..{MAX_RANK}")
    if any(extent < 1 for extent in arr.shape):
        raise ShapeMismatch(f"non-positive extent in shape {arr.shape}")
    return arr


def check_rank(arr: np.ndarray, rank: int, name: str = "tensor") -> np.ndarray:
    if arr.ndim != rank:
        raise ShapeMismatch(f"{name} must be rank {rank}, got shape {arr.shape}")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "operands") -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what} differ in shape: {a.shape} vs {b.shape}")


def check_finite(arr: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ShapeMismatch(f"{name} contains NaN or Inf")
    return arr


@dataclass
class LayerGrads:
    """Gradients a layer kernel returns from its backward pass.

    input_grad matches the recorded forward-input shape; param_grads maps
    each trainable parameter name to a gradient of that parameter's shape.
    """

    input_grad: np.ndarray
    param_grads: dict = field(default_factory=dict)
