"""Binary cross-entropy, Adam, and the balanced-batch training loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset, SamplingError, sample_balanced_batch
from .model import TinyModel, backward_pair, score_pair
from .numerics import DimensionError

__all__ = [
    "P_CLAMP",
    "InvariantError",
    "bce_loss",
    "AdamState",
    "adam_step",
    "TrainConfig",
    "EpochStats",
    "LossTrace",
    "train",
    "batch_gradient",
]

P_CLAMP = 1e-12


class InvariantError(RuntimeError):
    """An internal consistency check failed during training."""


def bce_loss(p, y) -> Tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. each probability."""
    p = np.atleast_1d(np.asarray(p, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if p.size == 0:
        raise ValueError("empty batch")
    if p.shape != y.shape:
        raise DimensionError(f"{p.size} probabilities but {y.size} labels")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 or 1")
    if not np.all((p >= 0.0) & (p <= 1.0)):
        raise ValueError("probabilities must lie in [0, 1]")
    n = p.size
    pc = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    loss = float(np.mean(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))))
    grad = (pc - y) / (pc * (1.0 - pc)) / n
    return loss, grad


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
    """One Adam update, applied to ``params`` in place. Returns ``(params, state)``."""
    if not (len(params) == len(grads) == len(state.m)):
        raise DimensionError(f"{len(params)} params, {len(grads)} grads, {len(state.m)} moment slots")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


@dataclass
class TrainConfig:
    """Defaults follow the fingerprint-verification row: Adam, batch 18, 120 epochs, BCE."""

    epochs: int = 120
    batch_size: int = 18
    lr: float = 1e-3
    seed: int = 0
    pairs_per_epoch: Optional[int] = None  # None -> batch_size * number of training records
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    check_gradient: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be even and >= 2")
        if self.pairs_per_epoch is not None and self.pairs_per_epoch < 1:
            raise ValueError("pairs_per_epoch must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    seconds: float


@dataclass
class LossTrace:
    epochs: List[EpochStats] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def losses(self) -> List[float]:
        return [e.mean_loss for e in self.epochs]

    def to_table(self, timings: bool = True) -> str:
        head = "epoch  mean_loss" + ("  seconds" if timings else "")
        lines = [head]
        for e in self.epochs:
            row = f"{e.epoch:5d}  {e.mean_loss!r}"
            if timings:
                row += f"  {e.seconds:.6f}"
            lines.append(row)
        return "\n".join(lines) + "\n"


def batch_gradient(model: TinyModel, left, right, labels):
    """Loss and mean-over-pairs parameter gradients for one batch."""
    p, acts = score_pair(model, left, right)
    loss, dL_dp = bce_loss(p, labels)
    return loss, backward_pair(model, acts, dL_dp)


def _pairwise_gradient(model: TinyModel, left, right, labels):
    # Per-pair composition summed in fixed order; reference for the batched path.
    total = [np.zeros_like(a) for a in model.parameters()]
    n = len(labels)
    for a, b, y in zip(left, right, labels):
        p, acts = score_pair(model, a, b)
        _, d = bce_loss([p], [y])
        for acc, g in zip(total, backward_pair(model, acts, float(d[0]) / n)):
            acc += g
    return total


def _check_batch_gradient(model, left, right, labels, grads, tol=1e-5):
    ref = _pairwise_gradient(model, left, right, labels)
    for name, g, r in zip(model.parameter_names(), grads, ref):
        scale = max(np.max(np.abs(r)), 1e-12)
        err = np.max(np.abs(g - r)) / scale
        if err > tol:
            raise InvariantError(f"batched gradient of {name} disagrees with per-pair gradient (rel err {err:.3e})")


def train(
    model: TinyModel,
    dataset: Dataset,
    config: TrainConfig,
    log: Optional[Callable[[EpochStats], None]] = None,
) -> Tuple[TinyModel, LossTrace]:
    """Train ``model`` in place on balanced batches drawn from ``dataset``.

    Each epoch runs ``ceil(pairs_per_epoch / batch_size)`` Adam steps, by default
    one balanced batch per training record. The recorded epoch loss is the mean
    of the batch losses seen before each step.
    """
    if dataset.dim != model.dim:
        raise DimensionError(f"dataset dim {dataset.dim} != model dim {model.dim}")
    if len(dataset.index) < 2 or not any(len(ix) >= 2 for ix in dataset.index.values()):
        raise SamplingError("dataset too small for balanced batches (need 2 subjects, one with 2 samples)")

    rng = np.random.default_rng(config.seed)
    half = config.batch_size // 2
    per_epoch = config.pairs_per_epoch or config.batch_size * len(dataset)
    steps = math.ceil(per_epoch / config.batch_size)
    params = model.parameters()
    state = AdamState.for_params(
        params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps
    )
    trace = LossTrace()
    checked = not config.check_gradient

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for _ in range(steps):
            batch = dataset.pair_batch(sample_balanced_batch(dataset, half, rng))
            loss, grads = batch_gradient(model, batch.left, batch.right, batch.labels)
            if not checked:
                _check_batch_gradient(model, batch.left, batch.right, batch.labels, grads)
                checked = True
            adam_step(state, params, grads)
            model.touch()
            losses.append(loss)
        stats = EpochStats(epoch, float(np.mean(losses)), time.perf_counter() - t0)
        trace.epochs.append(stats)
        if log is not None:
            log(stats)
    return model, trace
