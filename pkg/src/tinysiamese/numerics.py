"""Dense primitives with explicit forward and backward passes.

Every function accepts either a single vector of shape ``(d,)`` or a batch of
row vectors of shape ``(batch, d)``. Batched backward passes sum parameter
gradients over the batch rows; callers that want a mean divide upstream.
All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DimensionError",
    "LinearLayer",
    "as_vec",
    "linear_forward",
    "linear_backward",
    "relu",
    "relu_backward",
    "sigmoid",
    "sigmoid_backward",
]


class DimensionError(ValueError):
    """Raised when array shapes do not line up."""


def as_vec(x, name: str = "x") -> np.ndarray:
    """Promote ``x`` to a finite float64 array of rank 1 or 2."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim not in (1, 2) or arr.shape[-1] < 1:
        raise DimensionError(f"{name}: expected a vector or batch of vectors, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite values")
    return arr


@dataclass
class LinearLayer:
    """Affine map ``y = W x + b`` with ``W`` of shape (out_dim, in_dim)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2:
            raise DimensionError(f"weight must be 2-D, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"bias length {self.bias.shape} does not match weight rows {self.weight.shape[0]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def size(self) -> int:
        return self.weight.size + self.bias.size

    def copy(self) -> "LinearLayer":
        return LinearLayer(self.weight.copy(), self.bias.copy())


def _check_in(layer: LinearLayer, x: np.ndarray) -> None:
    if x.shape[-1] != layer.in_dim:
        raise DimensionError(f"input length {x.shape[-1]} != layer in_dim {layer.in_dim}")


def linear_forward(layer: LinearLayer, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_in(layer, x)
    return x @ layer.weight.T + layer.bias


def linear_backward(layer: LinearLayer, x, grad_out):
    """Return ``(grad_weight, grad_bias, grad_x)`` for upstream ``grad_out``."""
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    _check_in(layer, x)
    if grad_out.shape[-1] != layer.out_dim:
        raise DimensionError(f"grad_out length {grad_out.shape[-1]} != layer out_dim {layer.out_dim}")
    if grad_out.shape[:-1] != x.shape[:-1]:
        raise DimensionError(f"batch shapes differ: x {x.shape}, grad_out {grad_out.shape}")
    if x.ndim == 1:
        grad_weight = np.outer(grad_out, x)
        grad_bias = grad_out.copy()
    else:
        grad_weight = grad_out.T @ x
        grad_bias = grad_out.sum(axis=0)
    grad_x = grad_out @ layer.weight
    return grad_weight, grad_bias, grad_x


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x, grad_out) -> np.ndarray:
    # subgradient at exactly 0 is 0
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0.0, np.asarray(grad_out, dtype=np.float64), 0.0)


def sigmoid(x) -> np.ndarray:
    """Logistic function, evaluated on whichever branch keeps ``exp`` from overflowing."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y, grad_out) -> np.ndarray:
    """Backward pass in terms of the cached forward output ``y``."""
    y = np.asarray(y, dtype=np.float64)
    return np.asarray(grad_out, dtype=np.float64) * y * (1.0 - y)
