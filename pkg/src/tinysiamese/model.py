"""The TinySiamese network.

Both inputs run through one shared backbone::

    x -> Linear(n, n/2) -> ReLU -> Linear(n/2, n) -> Sigmoid -> e

The twin embeddings are merged by :func:`distance_vector` into
``[(e1 - e2)^2, e1 * e2]`` (length 2n), and the head
``Linear(2n, 1) -> Sigmoid`` turns that into a similarity probability.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from os import PathLike
from typing import List, Optional, Union

import numpy as np

from .errors import BadMagicError, BadVersionError, DimMismatchError, TruncatedError
from .numerics import (
    DimensionError,
    LinearLayer,
    as_vec,
    linear_backward,
    linear_forward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
)

__all__ = [
    "TinyModel",
    "TwinActivations",
    "PairActivations",
    "StaleActivationsError",
    "init_model",
    "embed",
    "distance_vector",
    "score_pair",
    "score_embeddings",
    "backward_pair",
    "parameter_count",
    "expected_parameter_count",
    "save_model",
    "load_model",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_MAGIC = b"TSMD"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sHI")


class StaleActivationsError(RuntimeError):
    """Activation cache does not belong to the model (or its current parameters)."""


@dataclass
class TinyModel:
    """Parameters of the network.

    ``backbone`` holds the shared twin layers in order; the default (and the only
    layout the checkpoint format covers) is ``[l1, l2]``. Extra ``n/2 -> n/2``
    ReLU layers may sit between them. ``hadamard=False`` drops the product half
    of the distance vector, in which case the head takes ``n`` inputs.
    """

    backbone: List[LinearLayer]
    head: LinearLayer
    hadamard: bool = True
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if len(self.backbone) < 2:
            raise DimensionError("backbone needs at least two layers")
        n = self.backbone[0].in_dim
        if n < 2 or n % 2:
            raise DimensionError(f"input dim must be even and >= 2, got {n}")
        prev = n
        for i, layer in enumerate(self.backbone):
            if layer.in_dim != prev:
                raise DimensionError(f"backbone layer {i} expects {layer.in_dim} inputs, previous gives {prev}")
            prev = layer.out_dim
        if self.backbone[0].out_dim != n // 2 or prev != n:
            raise DimensionError("backbone must map n -> n/2 -> ... -> n")
        head_in = 2 * n if self.hadamard else n
        if self.head.weight.shape != (1, head_in):
            raise DimensionError(f"head must be (1, {head_in}), got {self.head.weight.shape}")

    @property
    def dim(self) -> int:
        return self.backbone[0].in_dim

    @property
    def l1(self) -> LinearLayer:
        return self.backbone[0]

    @property
    def l2(self) -> LinearLayer:
        return self.backbone[-1]

    def layers(self) -> List[LinearLayer]:
        return [*self.backbone, self.head]

    def parameters(self) -> List[np.ndarray]:
        """Parameter arrays in checkpoint order (weight, bias per layer)."""
        out = []
        for layer in self.layers():
            out += [layer.weight, layer.bias]
        return out

    def parameter_names(self) -> List[str]:
        names = [f"backbone{i}" for i in range(len(self.backbone))] + ["head"]
        return [f"{n}.{p}" for n in names for p in ("weight", "bias")]

    def touch(self) -> None:
        """Mark parameters as modified; invalidates outstanding activation caches."""
        self.version += 1

    def copy(self) -> "TinyModel":
        return TinyModel([l.copy() for l in self.backbone], self.head.copy(), self.hadamard)


def expected_parameter_count(n: int) -> int:
    return (n * (n // 2) + n // 2) + ((n // 2) * n + n) + (2 * n + 1)


def parameter_count(model: TinyModel) -> int:
    return sum(layer.size for layer in model.layers())


def init_model(n: int, seed: int, *, extra_layers: int = 0, hadamard: bool = True) -> TinyModel:
    """Weights uniform in +-1/sqrt(fan_in), biases zero."""
    if not isinstance(n, (int, np.integer)) or n < 2 or n % 2:
        raise ValueError(f"n must be an even integer >= 2, got {n!r}")
    if extra_layers < 0:
        raise ValueError("extra_layers must be >= 0")
    rng = np.random.default_rng(seed)
    h = n // 2
    shapes = [(h, n)] + [(h, h)] * extra_layers + [(n, h)] + [(1, 2 * n if hadamard else n)]
    layers = []
    for out_dim, in_dim in shapes:
        bound = 1.0 / np.sqrt(in_dim)
        layers.append(LinearLayer(rng.uniform(-bound, bound, size=(out_dim, in_dim)), np.zeros(out_dim)))
    return TinyModel(layers[:-1], layers[-1], hadamard)


@dataclass
class TwinActivations:
    """Forward cache for one twin: the input to every backbone layer plus its pre-activation."""

    inputs: List[np.ndarray]
    pre: List[np.ndarray]
    out: np.ndarray


@dataclass
class PairActivations:
    left: TwinActivations
    right: TwinActivations
    distance: np.ndarray
    head_pre: np.ndarray
    p: Union[float, np.ndarray]
    model_id: int
    model_version: int


def _embed_cached(model: TinyModel, x: np.ndarray) -> TwinActivations:
    inputs, pre = [], []
    h = x
    last = len(model.backbone) - 1
    for i, layer in enumerate(model.backbone):
        inputs.append(h)
        z = linear_forward(layer, h)
        pre.append(z)
        h = sigmoid(z) if i == last else relu(z)
    return TwinActivations(inputs, pre, h)


def _check_input(model: TinyModel, x, name: str) -> np.ndarray:
    x = as_vec(x, name)
    if x.shape[-1] != model.dim:
        raise DimensionError(f"{name} has length {x.shape[-1]}, model dim is {model.dim}")
    return x


def embed(model: TinyModel, x) -> np.ndarray:
    """Backbone output for ``x`` (one vector or a batch of rows); entries lie in (0, 1)."""
    return _embed_cached(model, _check_input(model, x, "x")).out


def distance_vector(e1, e2, hadamard: bool = True) -> np.ndarray:
    """Concatenate the squared difference and the elementwise product of two embeddings."""
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if e1.shape != e2.shape:
        raise DimensionError(f"embedding shapes differ: {e1.shape} vs {e2.shape}")
    diff = e1 - e2
    sq = diff * diff
    if not hadamard:
        return sq
    return np.concatenate([sq, e1 * e2], axis=-1)


def score_embeddings(model: TinyModel, e1, e2):
    """Similarity probability from two precomputed backbone outputs."""
    d = distance_vector(e1, e2, model.hadamard)
    z = linear_forward(model.head, d)[..., 0]
    p = sigmoid(z)
    return float(p) if p.ndim == 0 else p


def score_pair(model: TinyModel, x1, x2):
    """Similarity probability and the activation cache for :func:`backward_pair`.

    With 1-D inputs ``p`` is a float; with ``(batch, n)`` inputs it is an array.
    """
    x1 = _check_input(model, x1, "x1")
    x2 = _check_input(model, x2, "x2")
    if x1.shape != x2.shape:
        raise DimensionError(f"input shapes differ: {x1.shape} vs {x2.shape}")
    left = _embed_cached(model, x1)
    right = _embed_cached(model, x2)
    d = distance_vector(left.out, right.out, model.hadamard)
    z = linear_forward(model.head, d)[..., 0]
    p = sigmoid(z)
    if p.ndim == 0:
        p = float(p)
    return p, PairActivations(left, right, d, z, p, id(model), model.version)


def _embed_backward(model: TinyModel, acts: TwinActivations, grad_e: np.ndarray, grads: List[np.ndarray]):
    g = sigmoid_backward(acts.out, grad_e)
    for i in range(len(model.backbone) - 1, -1, -1):
        if i != len(model.backbone) - 1:
            g = relu_backward(acts.pre[i], g)
        gw, gb, g = linear_backward(model.backbone[i], acts.inputs[i], g)
        grads[2 * i] += gw
        grads[2 * i + 1] += gb


def backward_pair(model: TinyModel, acts: PairActivations, dL_dp) -> List[np.ndarray]:
    """Gradients of the loss w.r.t. every parameter, in ``model.parameters()`` order.

    For batched activations ``dL_dp`` has one entry per pair and the parameter
    gradients are summed over pairs. Both twins add into the shared backbone.
    """
    if acts.model_id != id(model) or acts.model_version != model.version:
        raise StaleActivationsError("activations were computed by a different model or older parameters")
    p = np.asarray(acts.p, dtype=np.float64)
    dL_dp = np.asarray(dL_dp, dtype=np.float64)
    if dL_dp.shape != p.shape:
        raise DimensionError(f"dL_dp shape {dL_dp.shape} does not match scores {p.shape}")

    grads = [np.zeros_like(a) for a in model.parameters()]
    g_z = sigmoid_backward(p, dL_dp)[..., None]
    gw, gb, g_d = linear_backward(model.head, acts.distance, g_z)
    grads[-2] += gw
    grads[-1] += gb

    n = model.dim
    e1, e2 = acts.left.out, acts.right.out
    g_sq = g_d[..., :n]
    two_diff = 2.0 * (e1 - e2)
    g_e1 = g_sq * two_diff
    g_e2 = -g_sq * two_diff
    if model.hadamard:
        g_had = g_d[..., n:]
        g_e1 = g_e1 + g_had * e2
        g_e2 = g_e2 + g_had * e1

    _embed_backward(model, acts.left, g_e1, grads)
    _embed_backward(model, acts.right, g_e2, grads)
    return grads


def save_model(model: TinyModel, path: Union[str, PathLike]) -> None:
    if len(model.backbone) != 2 or not model.hadamard:
        raise ValueError("checkpoint format only covers the default two-layer model with the full distance layer")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, model.dim))
        for arr in model.parameters():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path: Union[str, PathLike], expected_dim: Optional[int] = None) -> TinyModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 and CHECKPOINT_MAGIC.startswith(raw):
        raise TruncatedError(f"{path}: truncated inside the magic ({len(raw)} bytes)")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic, not a TinySiamese checkpoint")
    if len(raw) < _HEADER.size:
        raise TruncatedError(f"{path}: truncated header ({len(raw)} bytes)")
    _, version, n = _HEADER.unpack_from(raw)
    if version != CHECKPOINT_VERSION:
        raise BadVersionError(f"{path}: unsupported checkpoint version {version}")
    if n < 2 or n % 2:
        raise DimMismatchError(f"{path}: invalid model dim {n}")
    if expected_dim is not None and n != expected_dim:
        raise DimMismatchError(f"{path}: checkpoint dim {n} != expected {expected_dim}")
    h = n // 2
    shapes = [(h, n), (h,), (n, h), (n,), (1, 2 * n), (1,)]
    need = _HEADER.size + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(raw) < need:
        raise TruncatedError(f"{path}: truncated, expected {need} bytes, found {len(raw)}")
    if len(raw) > need:
        raise DimMismatchError(f"{path}: {len(raw) - need} trailing bytes after dim-{n} parameters")
    arrays, off = [], _HEADER.size
    for s in shapes:
        count = int(np.prod(s))
        arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(s))
        off += 8 * count
    l1 = LinearLayer(arrays[0], arrays[1])
    l2 = LinearLayer(arrays[2], arrays[3])
    return TinyModel([l1, l2], LinearLayer(arrays[4], arrays[5]))
