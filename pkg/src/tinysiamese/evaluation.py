"""Verification metrics, threshold sweeps, gallery/probe classification and timing."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from .data import Dataset, PairBatch
from .model import TinyModel, embed, score_embeddings, score_pair
from .numerics import DimensionError
from .training import TrainConfig, train

__all__ = [
    "Confusion",
    "EvalReport",
    "BenchReport",
    "ClassReport",
    "ClassificationReport",
    "confusion_from_scores",
    "report_from_confusion",
    "evaluate_scores",
    "evaluate_verification",
    "sweep_thresholds",
    "sweep_thresholds_from_scores",
    "sweep_grid",
    "gallery_probe_scores",
    "classify_gallery_probe",
    "bench_matching",
    "bench_training",
    "format_table",
    "format_kv",
]


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _ratio(num: int, den: int) -> float:
    # zero denominator -> 0 rather than NaN
    return num / den if den else 0.0


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    fpr: float
    fnr: float
    threshold: float
    confusion: Confusion

    def as_dict(self) -> Dict[str, float]:
        c = self.confusion
        return {
            "threshold": self.threshold,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "fpr": self.fpr,
            "fnr": self.fnr,
            "tp": c.tp,
            "fp": c.fp,
            "tn": c.tn,
            "fn": c.fn,
        }


def report_from_confusion(conf: Confusion, threshold: float) -> EvalReport:
    if conf.total == 0:
        raise ValueError("no evaluated pairs")
    precision = _ratio(conf.tp, conf.tp + conf.fp)
    recall = _ratio(conf.tp, conf.tp + conf.fn)
    f1 = _ratio(2 * precision * recall, precision + recall) if precision + recall else 0.0
    return EvalReport(
        accuracy=(conf.tp + conf.tn) / conf.total,
        precision=precision,
        recall=recall,
        f1=f1,
        fpr=_ratio(conf.fp, conf.fp + conf.tn),
        fnr=_ratio(conf.fn, conf.fn + conf.tp),
        threshold=threshold,
        confusion=conf,
    )


def confusion_from_scores(scores, labels, threshold: float) -> Confusion:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise DimensionError(f"{scores.size} scores but {labels.size} labels")
    pred = scores >= threshold
    pos = labels == 1
    return Confusion(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def evaluate_scores(scores, labels, threshold: float = 0.5) -> EvalReport:
    if len(np.atleast_1d(scores)) == 0:
        raise ValueError("empty pair list")
    return report_from_confusion(confusion_from_scores(scores, labels, threshold), threshold)


def evaluate_verification(model: TinyModel, pairs: PairBatch, threshold: float = 0.5) -> EvalReport:
    """Predict "same subject" when the score is at least ``threshold``."""
    if len(pairs) == 0:
        raise ValueError("empty pair list")
    p, _ = score_pair(model, pairs.left, pairs.right)
    return evaluate_scores(p, pairs.labels, threshold)


def sweep_grid(steps: int) -> np.ndarray:
    """``steps`` thresholds evenly spaced strictly inside (0, 1)."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    return np.arange(1, steps + 1) / (steps + 1)


def sweep_thresholds_from_scores(scores, labels, steps: int):
    return [(float(t), evaluate_scores(scores, labels, float(t))) for t in sweep_grid(steps)]


def sweep_thresholds(model: TinyModel, pairs: PairBatch, steps: int):
    if len(pairs) == 0:
        raise ValueError("empty pair list")
    grid = sweep_grid(steps)
    p, _ = score_pair(model, pairs.left, pairs.right)
    return [(float(t), evaluate_scores(p, pairs.labels, float(t))) for t in grid]


# -- gallery / probe --------------------------------------------------------


@dataclass
class ClassReport:
    class_id: int
    probes: int
    correct: int
    precision: float
    recall: float
    f1: float


@dataclass
class ClassificationReport:
    accuracy: float
    evaluated: int
    correct: int
    predictions: List[Optional[int]]
    per_class: List[ClassReport]
    missing: List[int] = field(default_factory=list)  # probe positions whose class is not in the gallery
    aggregate: str = "mean"

    @property
    def macro_precision(self) -> float:
        return float(np.mean([c.precision for c in self.per_class])) if self.per_class else 0.0

    @property
    def macro_recall(self) -> float:
        return float(np.mean([c.recall for c in self.per_class])) if self.per_class else 0.0

    @property
    def macro_f1(self) -> float:
        return float(np.mean([c.f1 for c in self.per_class])) if self.per_class else 0.0


def gallery_probe_scores(model: TinyModel, gallery: Dataset, probes: Dataset) -> np.ndarray:
    """Score matrix of shape (probes, gallery records)."""
    if gallery.dim != probes.dim or gallery.dim != model.dim:
        raise DimensionError(f"dims differ: model {model.dim}, gallery {gallery.dim}, probes {probes.dim}")
    eg = embed(model, gallery.vectors)
    ep = embed(model, probes.vectors)
    return np.stack([score_embeddings(model, np.broadcast_to(e, eg.shape), eg) for e in ep])


def classify_gallery_probe(
    model: TinyModel, gallery: Dataset, probes: Dataset, aggregate: str = "mean"
) -> ClassificationReport:
    """Assign each probe the gallery class with the highest aggregated score.

    ``aggregate`` is ``"mean"`` or ``"max"`` over that class's gallery records.
    Ties go to the lowest class id. Probes whose class has no gallery record are
    listed in ``missing`` and left out of the accuracy.
    """
    reducers = {"mean": np.mean, "max": np.max}
    if aggregate not in reducers:
        raise ValueError(f"aggregate must be one of {sorted(reducers)}")
    reduce = reducers[aggregate]
    scores = gallery_probe_scores(model, gallery, probes)
    classes = gallery.subject_ids
    per_class = np.stack([reduce(scores[:, gallery.index[c]], axis=1) for c in classes], axis=1)
    # np.argmax returns the first maximum, and classes are sorted ascending
    best = [classes[i] for i in np.argmax(per_class, axis=1)]

    known = set(classes)
    predictions: List[Optional[int]] = []
    missing = []
    for pos, (truth, guess) in enumerate(zip(probes.subjects, best)):
        if int(truth) in known:
            predictions.append(guess)
        else:
            predictions.append(None)
            missing.append(pos)

    rows = []
    truth_all = [int(t) for t in probes.subjects]
    for c in classes:
        tp = sum(1 for t, p in zip(truth_all, predictions) if p is not None and t == c and p == c)
        fp = sum(1 for t, p in zip(truth_all, predictions) if p is not None and t != c and p == c)
        n_c = sum(1 for t, p in zip(truth_all, predictions) if p is not None and t == c)
        prec = _ratio(tp, tp + fp)
        rec = _ratio(tp, n_c)
        f1 = _ratio(2 * prec * rec, prec + rec) if prec + rec else 0.0
        rows.append(ClassReport(c, n_c, tp, prec, rec, f1))

    evaluated = len(predictions) - len(missing)
    correct = sum(r.correct for r in rows)
    return ClassificationReport(
        accuracy=_ratio(correct, evaluated),
        evaluated=evaluated,
        correct=correct,
        predictions=predictions,
        per_class=rows,
        missing=missing,
        aggregate=aggregate,
    )


# -- timing -----------------------------------------------------------------


@dataclass
class BenchReport:
    trials: int
    match_seconds: List[float]
    cached_match_seconds: List[float]
    train10_seconds: List[float] = field(default_factory=list)
    dim: int = 0

    @property
    def mean_match_seconds(self) -> float:
        return float(np.mean(self.match_seconds))

    @property
    def mean_cached_match_seconds(self) -> float:
        return float(np.mean(self.cached_match_seconds))

    @property
    def mean_train10_seconds(self) -> Optional[float]:
        return float(np.mean(self.train10_seconds)) if self.train10_seconds else None

    def as_dict(self) -> Dict[str, float]:
        out = {
            "dim": self.dim,
            "trials": self.trials,
            "mean_match_seconds": self.mean_match_seconds,
            "mean_cached_match_seconds": self.mean_cached_match_seconds,
            "min_match_seconds": min(self.match_seconds),
            "max_match_seconds": max(self.match_seconds),
        }
        if self.train10_seconds:
            out["mean_train10_seconds"] = self.mean_train10_seconds
        return out


def bench_matching(model: TinyModel, dataset: Dataset, trials: int = 10, seed: int = 0) -> BenchReport:
    """Wall-clock time per match on ``trials`` random record pairs.

    The uncached timing covers both backbone passes plus the head. The cached
    timing embeds the pair beforehand and covers the distance layer and head only.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if dataset.dim != model.dim:
        raise DimensionError(f"dataset dim {dataset.dim} != model dim {model.dim}")
    rng = np.random.default_rng(seed)
    idx = rng.integers(len(dataset), size=(trials, 2))
    clock = time.perf_counter
    # warm-up so the first trial does not pay for lazy allocation
    score_pair(model, dataset.vectors[0], dataset.vectors[0])

    full, cached = [], []
    for i, j in idx:
        a, b = dataset.vectors[i], dataset.vectors[j]
        t0 = clock()
        score_pair(model, a, b)
        full.append(clock() - t0)

        ea, eb = embed(model, a), embed(model, b)
        t0 = clock()
        score_embeddings(model, ea, eb)
        cached.append(clock() - t0)
    return BenchReport(trials, full, cached, dim=model.dim)


def bench_training(
    model: TinyModel, dataset: Dataset, config: TrainConfig, repeats: int = 1, epochs: int = 10
) -> List[float]:
    """Seconds taken by ``epochs`` epochs of training, once per repeat, on copies of ``model``."""
    cfg = replace(config, epochs=epochs)
    out = []
    for _ in range(repeats):
        m = model.copy()
        t0 = time.perf_counter()
        train(m, dataset, cfg)
        out.append(time.perf_counter() - t0)
    return out


# -- output -----------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def format_table(values: Dict[str, object]) -> str:
    width = max(len(k) for k in values)
    return "\n".join(f"{k:<{width}}  {_fmt(v)}" for k, v in values.items()) + "\n"


def format_kv(values: Dict[str, object]) -> str:
    return "\n".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in values.items()) + "\n"
