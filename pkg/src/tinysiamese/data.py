"""Feature-vector datasets, their file formats, and balanced pair sampling.

Binary layout (little-endian)::

    "TSFV" | version u16 = 1 | dim u32 | count u32
    count x ( subject_id u32 | dim x float32 )

Text layout: one record per line, ``subject_id,v1,...,vdim``; lines starting
with ``#`` and blank lines are skipped.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from os import PathLike
from typing import Dict, List, Sequence, Union

import numpy as np

from .errors import BadMagicError, BadVersionError, DimMismatchError, EmptyFileError, FormatError, TruncatedError

__all__ = [
    "FeatureRecord",
    "Dataset",
    "Pair",
    "PairBatch",
    "SamplingError",
    "load_dataset",
    "save_dataset",
    "generate_synthetic",
    "sample_balanced_batch",
    "split_per_subject",
    "save_pair_file",
    "load_pair_file",
    "FEATURE_MAGIC",
    "FEATURE_VERSION",
]

FEATURE_MAGIC = b"TSFV"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sHII")

PathType = Union[str, PathLike]


class SamplingError(ValueError):
    """The dataset cannot supply a balanced batch."""


@dataclass(frozen=True)
class FeatureRecord:
    subject_id: int
    vector: np.ndarray


@dataclass
class Dataset:
    """Records stored column-wise: ``vectors[i]`` belongs to ``subjects[i]``."""

    vectors: np.ndarray
    subjects: np.ndarray
    index: Dict[int, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1 or self.vectors.shape[1] < 1:
            raise ValueError(f"dataset needs at least one record, got vectors of shape {self.vectors.shape}")
        if self.subjects.shape != (self.vectors.shape[0],):
            raise ValueError("one subject id per record required")
        if np.any(self.subjects < 0) or np.any(self.subjects > 0xFFFFFFFF):
            raise ValueError("subject ids must fit in u32")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("non-finite feature values")
        self.index = {int(s): np.flatnonzero(self.subjects == s) for s in np.unique(self.subjects)}

    @classmethod
    def from_records(cls, records: Sequence[FeatureRecord]) -> "Dataset":
        if not records:
            raise ValueError("dataset needs at least one record")
        dims = {np.asarray(r.vector).shape for r in records}
        if len(dims) != 1:
            raise DimMismatchError(f"records have mixed shapes {sorted(dims)}")
        return cls(np.stack([r.vector for r in records]), [r.subject_id for r in records])

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def records(self) -> List[FeatureRecord]:
        return [FeatureRecord(int(s), v) for s, v in zip(self.subjects, self.vectors)]

    @property
    def subject_ids(self) -> List[int]:
        return sorted(self.index)

    def subset(self, positions) -> "Dataset":
        positions = np.asarray(positions, dtype=np.int64)
        return Dataset(self.vectors[positions], self.subjects[positions])

    def pair_batch(self, pairs: Sequence["Pair"]) -> "PairBatch":
        left = np.array([p.left for p in pairs], dtype=np.int64)
        right = np.array([p.right for p in pairs], dtype=np.int64)
        return PairBatch(self.vectors[left], self.vectors[right], np.array([p.label for p in pairs]))


@dataclass(frozen=True)
class Pair:
    """Two record positions within one dataset and whether they share a subject."""

    left: int
    right: int
    label: int


@dataclass
class PairBatch:
    left: np.ndarray
    right: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.left = np.atleast_2d(np.asarray(self.left, dtype=np.float64))
        self.right = np.atleast_2d(np.asarray(self.right, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.left.shape != self.right.shape or self.left.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"pair batch shapes disagree: left {self.left.shape}, right {self.right.shape}, labels {self.labels.shape}"
            )
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be 0 or 1")

    def __len__(self) -> int:
        return self.labels.shape[0]


# -- file formats -----------------------------------------------------------


def save_dataset(dataset: Dataset, path: PathType, format: str = "binary") -> None:
    if format == "binary":
        rec = np.dtype([("sid", "<u4"), ("vec", "<f4", (dataset.dim,))])
        body = np.empty(len(dataset), dtype=rec)
        body["sid"] = dataset.subjects
        body["vec"] = dataset.vectors
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, dataset.dim, len(dataset)))
            fh.write(body.tobytes())
    elif format == "text":
        vecs = dataset.vectors.astype(np.float32)
        with open(path, "w") as fh:
            fh.write(f"# tinysiamese features dim={dataset.dim} count={len(dataset)}\n")
            for sid, v in zip(dataset.subjects, vecs):
                # shortest float32 repr; parses back to the same float32
                fh.write(",".join([str(int(sid))] + [str(x) for x in v]) + "\n")
    else:
        raise ValueError(f"unknown format {format!r}")


def _load_binary(path: PathType) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw:
        raise EmptyFileError(f"{path}: empty file")
    if len(raw) < 4 and FEATURE_MAGIC.startswith(raw):
        raise TruncatedError(f"{path}: truncated inside the magic")
    if raw[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedError(f"{path}: truncated header")
    _, version, dim, count = _HEADER.unpack_from(raw)
    if version != FEATURE_VERSION:
        raise BadVersionError(f"{path}: unsupported version {version}")
    if dim < 1:
        raise DimMismatchError(f"{path}: invalid dim {dim}")
    if count < 1:
        raise EmptyFileError(f"{path}: no records")
    rec = np.dtype([("sid", "<u4"), ("vec", "<f4", (dim,))])
    have = (len(raw) - _HEADER.size) // rec.itemsize
    if have < count:
        raise TruncatedError(f"{path}: truncated, header declares {count} records, found {have}")
    if len(raw) != _HEADER.size + count * rec.itemsize:
        raise DimMismatchError(f"{path}: trailing bytes after {count} records of dim {dim}")
    body = np.frombuffer(raw, dtype=rec, count=count, offset=_HEADER.size)
    vecs = body["vec"].astype(np.float64)
    if not np.all(np.isfinite(vecs)):
        raise FormatError(f"{path}: non-finite feature values")
    return Dataset(vecs, body["sid"].astype(np.int64))


def _load_text(path: PathType) -> Dataset:
    subjects, rows = [], []
    dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = [f.strip() for f in line.split(",")]
            if dim is None:
                dim = len(fields) - 1
                if dim < 1:
                    raise DimMismatchError(f"{path}:{lineno}: record has no feature values")
            elif len(fields) - 1 != dim:
                raise DimMismatchError(
                    f"{path}:{lineno}: expected {dim} values, found {len(fields) - 1}"
                )
            try:
                sid = int(fields[0])
                values = [float(f) for f in fields[1:]]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-numeric field ({exc})") from None
            if sid < 0:
                raise FormatError(f"{path}:{lineno}: negative subject id {sid}")
            if not all(np.isfinite(values)):
                raise FormatError(f"{path}:{lineno}: non-finite value")
            subjects.append(sid)
            rows.append(values)
    if not rows:
        raise EmptyFileError(f"{path}: no records")
    return Dataset(np.array(rows, dtype=np.float64), subjects)


def load_dataset(path: PathType, format: str = "binary") -> Dataset:
    if format == "binary":
        return _load_binary(path)
    if format == "text":
        return _load_text(path)
    raise ValueError(f"unknown format {format!r}")


def save_pair_file(batch: PairBatch, path: PathType, labeled: bool = True) -> None:
    """Text pair file: ``label,left...,right...`` per line (label omitted when unlabeled)."""
    with open(path, "w") as fh:
        fh.write(f"# tinysiamese pairs dim={batch.left.shape[1]} count={len(batch)}\n")
        for a, b, y in zip(batch.left, batch.right, batch.labels):
            head = [str(int(y))] if labeled else []
            fh.write(",".join(head + [repr(float(x)) for x in a] + [repr(float(x)) for x in b]) + "\n")


def load_pair_file(path: PathType, dim: int):
    """Read a pair file for vectors of length ``dim``.

    Returns ``(left, right, labels)``; ``labels`` is None when the file carries none.
    A file must be uniformly labeled or unlabeled.
    """
    left, right, labels = [], [], []
    labeled = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split(",")
            if len(fields) == 2 * dim + 1:
                this = True
            elif len(fields) == 2 * dim:
                this = False
            else:
                raise DimMismatchError(
                    f"{path}:{lineno}: expected {2 * dim} or {2 * dim + 1} fields for dim {dim}, found {len(fields)}"
                )
            if labeled is None:
                labeled = this
            elif labeled != this:
                raise FormatError(f"{path}:{lineno}: mixes labeled and unlabeled rows")
            try:
                values = [float(f) for f in fields[1:]] if this else [float(f) for f in fields]
                y = int(fields[0]) if this else None
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-numeric field ({exc})") from None
            if this:
                if y not in (0, 1):
                    raise FormatError(f"{path}:{lineno}: label must be 0 or 1, got {y}")
                labels.append(y)
            if not all(np.isfinite(values)):
                raise FormatError(f"{path}:{lineno}: non-finite value")
            left.append(values[:dim])
            right.append(values[dim:])
    if not left:
        raise EmptyFileError(f"{path}: no pairs")
    return np.array(left), np.array(right), (np.array(labels) if labeled else None)


# -- synthetic data ---------------------------------------------------------


def generate_synthetic(
    subjects: int,
    samples_per_subject: int,
    dim: int,
    spread: float = 1.0,
    noise: float = 0.05,
    seed: int = 0,
) -> Dataset:
    """Gaussian clusters: centres uniform in ``[0, spread]^dim``, per-sample noise of std ``noise``.

    ``noise=0`` is accepted and gives identical samples per subject.
    """
    if subjects < 2:
        raise ValueError("need at least 2 subjects")
    if samples_per_subject < 2:
        raise ValueError("need at least 2 samples per subject")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if not (0 <= noise < spread):
        raise ValueError("require 0 <= noise < spread")
    rng = np.random.default_rng(seed)
    centres = rng.uniform(0.0, spread, size=(subjects, dim))
    eps = rng.standard_normal(size=(subjects, samples_per_subject, dim))
    vectors = (centres[:, None, :] + noise * eps).reshape(-1, dim)
    ids = np.repeat(np.arange(subjects), samples_per_subject)
    return Dataset(vectors, ids)


def split_per_subject(dataset: Dataset, n_first: int) -> tuple:
    """Split each subject's records into its first ``n_first`` and the rest, keeping order."""
    first, rest = [], []
    for sid in dataset.subject_ids:
        pos = dataset.index[sid]
        first.extend(pos[:n_first])
        rest.extend(pos[n_first:])
    return dataset.subset(sorted(first)), dataset.subset(sorted(rest))


# -- pairing ----------------------------------------------------------------


def sample_balanced_batch(dataset: Dataset, N: int, rng: np.random.Generator) -> List[Pair]:
    """``N`` same-subject pairs from one anchor subject, then ``N`` anchor-vs-other pairs.

    The anchor is drawn uniformly from subjects with at least two records. Positive
    pairs use two distinct records of the anchor; each negative pairs a random
    anchor record with a random record of another subject.
    """
    if N < 1:
        raise SamplingError("N must be >= 1")
    if len(dataset.index) < 2:
        raise SamplingError("balanced pairs need at least two subjects")
    eligible = [s for s in dataset.subject_ids if len(dataset.index[s]) >= 2]
    if not eligible:
        raise SamplingError("no subject has two records to form a similar pair")

    anchor = eligible[int(rng.integers(len(eligible)))]
    own = dataset.index[anchor]
    others = np.flatnonzero(dataset.subjects != anchor)

    pairs = []
    for _ in range(N):
        i, j = rng.choice(len(own), size=2, replace=False)
        pairs.append(Pair(int(own[i]), int(own[j]), 1))
    for _ in range(N):
        a = own[int(rng.integers(len(own)))]
        b = others[int(rng.integers(len(others)))]
        pairs.append(Pair(int(a), int(b), 0))
    return pairs
