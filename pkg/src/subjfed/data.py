"""Synthetic data, non-IID partitioning, class re-balancing and file loading."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .special import RngStream, dirichlet_sample

__all__ = [
    "LabeledDataset",
    "PartitionSpec",
    "DataError",
    "ParseError",
    "make_blobs",
    "dirichlet_partition",
    "rebalance_down",
    "rebalance_up",
    "make_ood",
    "train_test_split",
    "load_delimited",
]


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, line: int, column: int, reason: str):
        super().__init__(f"line {line}, column {column}: {reason}")
        self.line = line
        self.column = column
        self.reason = reason


@dataclass(eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    k: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise DataError("features must be (n, d) and labels (n,)")
        n = self.labels.size
        if n < 1:
            raise DataError("dataset is empty")
        if self.features.shape[0] != n:
            raise DataError("features and labels disagree on n")
        if self.labels.min() < 0 or self.labels.max() >= self.k:
            raise DataError(f"labels must lie in [0, {self.k})")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features must be finite")

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.k)


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    beta: float
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 2:
            raise DataError("need at least two clients")
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise DataError("beta must be positive")


def class_means(k: int, dim: int, radius: float = 1.0) -> np.ndarray:
    """Class centres evenly spaced on a circle in the first two coordinates."""
    means = np.zeros((k, dim))
    angles = 2.0 * np.pi * np.arange(k) / k
    means[:, 0] = radius * np.cos(angles)
    if dim > 1:
        means[:, 1] = radius * np.sin(angles)
    return means


def make_blobs(
    k: int, per_class: int, dim: int, spread: float, rng: RngStream, radius: float = 1.0
) -> LabeledDataset:
    """Isotropic Gaussian clusters, exactly ``per_class`` points each."""
    if k < 2 or per_class < 1 or dim < 1:
        raise DataError("need k >= 2, per_class >= 1, dim >= 1")
    means = class_means(k, dim, radius)
    labels = np.repeat(np.arange(k), per_class)
    noise = rng.generator.normal(0.0, 1.0, (labels.size, dim))
    return LabeledDataset(means[labels] + spread * noise, labels, k)


def _split_points(count: int, proportions: np.ndarray) -> np.ndarray:
    cuts = (np.cumsum(proportions) * count).astype(np.int64)[:-1]
    return np.clip(cuts, 0, count)


def dirichlet_partition(data: LabeledDataset, spec: PartitionSpec) -> list[LabeledDataset]:
    """Label-skewed split: each class is divided among clients by a Dir(beta) draw."""
    N = spec.num_clients
    if data.n < N:
        raise DataError(f"{data.n} samples cannot cover {N} clients")
    rng = RngStream.for_purpose(spec.seed, "partition")
    gen = rng.generator
    by_class = [gen.permutation(np.flatnonzero(data.labels == c)) for c in range(data.k)]

    def assign() -> list[list[np.ndarray]]:
        parts: list[list[np.ndarray]] = [[] for _ in range(N)]
        for idx in by_class:
            if idx.size == 0:
                continue
            props = dirichlet_sample(rng, np.full(N, spec.beta))
            for client, chunk in enumerate(np.split(idx, _split_points(idx.size, props))):
                parts[client].append(chunk)
        return parts

    for _ in range(100):
        parts = assign()
        sizes = [sum(c.size for c in p) for p in parts]
        if min(sizes) > 0:
            break
    else:
        parts = _repair(parts, N)

    shards = []
    for p in parts:
        idx = np.sort(np.concatenate(p)) if p else np.zeros(0, dtype=np.int64)
        if idx.size == 0:
            raise DataError("partition repair failed")
        shards.append(data.subset(idx))
    return shards


def _repair(parts: list[list[np.ndarray]], N: int) -> list[list[np.ndarray]]:
    """Move single samples from the largest clients to empty ones, round-robin."""
    flat = [np.concatenate(p) if p else np.zeros(0, dtype=np.int64) for p in parts]
    for client in range(N):
        if flat[client].size:
            continue
        donor = int(np.argmax([f.size for f in flat]))
        if flat[donor].size < 2:
            raise DataError("partition repair failed: not enough samples")
        flat[client] = flat[donor][-1:]
        flat[donor] = flat[donor][:-1]
    return [[f] for f in flat]


def rebalance_down(data: LabeledDataset, filter_no: int, rng: RngStream) -> LabeledDataset:
    """Subsample every class above the smallest qualifying class count.

    The target T is the minimum count among classes holding at least
    ``filter_no`` samples; larger classes are cut to T without replacement
    and smaller ones are kept whole.
    """
    counts = data.class_counts()
    qualifying = counts[counts >= filter_no]
    if qualifying.size == 0:
        raise DataError(f"no class has at least {filter_no} samples")
    target = int(qualifying.min())
    keep = []
    for c in range(data.k):
        idx = np.flatnonzero(data.labels == c)
        if idx.size > target:
            idx = np.sort(rng.generator.choice(idx, size=target, replace=False))
        keep.append(idx)
    return data.subset(np.concatenate(keep))


def rebalance_up(data: LabeledDataset, rng: RngStream, filter_no: int = 20) -> LabeledDataset:
    """Resample each qualifying class with replacement to the largest class count.

    Classes with fewer than ``filter_no`` samples are left as they are.
    """
    counts = data.class_counts()
    target = int(counts.max())
    keep = []
    for c in range(data.k):
        idx = np.flatnonzero(data.labels == c)
        if idx.size >= filter_no:
            idx = rng.generator.choice(idx, size=target, replace=True)
        keep.append(idx)
    return data.subset(np.concatenate(keep))


def train_test_split(
    data: LabeledDataset, test_fraction: float, rng: RngStream
) -> tuple[LabeledDataset, LabeledDataset | None]:
    """Per-class split so train and test share the class mix; test may be None."""
    train, test = [], []
    for c in range(data.k):
        idx = rng.generator.permutation(np.flatnonzero(data.labels == c))
        n_test = int(round(idx.size * test_fraction))
        if n_test >= idx.size and idx.size > 0:
            n_test = idx.size - 1
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    train_idx = np.sort(np.concatenate(train))
    test_idx = np.sort(np.concatenate(test))
    return data.subset(train_idx), (data.subset(test_idx) if test_idx.size else None)


def make_ood(
    n: int, dim: int, in_dist: LabeledDataset, rng: RngStream, max_draws: int = 1_000_000
) -> np.ndarray:
    """Uniform points in a box three times the data's bounding box, away from the classes.

    A candidate is rejected when it lies within ``max(2 * spread, r99)`` of any
    class centroid, where spread is the pooled per-axis within-class standard
    deviation and r99 the 99th percentile of in-distribution distances to the
    nearest centroid.
    """
    if n < 1:
        raise DataError("n must be positive")
    if in_dist.dim != dim:
        raise DataError("dim does not match the in-distribution features")
    X = in_dist.features
    present = [c for c in range(in_dist.k) if np.any(in_dist.labels == c)]
    centroids = np.array([X[in_dist.labels == c].mean(axis=0) for c in present])
    resid = X - centroids[np.searchsorted(present, in_dist.labels)]
    spread = float(np.sqrt(np.mean(resid * resid)))
    r99 = float(np.quantile(_nearest_distance(X, centroids), 0.99))
    radius = max(2.0 * spread, r99)

    lo, hi = X.min(axis=0), X.max(axis=0)
    centre, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    half = np.where(half > 0, half, 1.0)
    out = np.empty((0, dim))
    drawn = 0
    while out.shape[0] < n:
        if drawn >= max_draws:
            raise DataError("OOD rejection sampling exhausted its budget")
        size = min(max(4 * n, 64), max_draws - drawn)
        batch = rng.generator.uniform(centre - 3 * half, centre + 3 * half, (size, dim))
        drawn += batch.shape[0]
        ok = _nearest_distance(batch, centroids) > radius
        out = np.vstack([out, batch[ok]])
    return out[:n]


def _nearest_distance(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1)).min(axis=1)


def load_delimited(
    path: str | Path,
    label_column: int | str = -1,
    num_classes: int | None = None,
    delimiter: str | None = None,
    header: bool | None = None,
) -> LabeledDataset:
    """Read numeric features plus one integer label column from CSV/TSV text.

    ``delimiter`` defaults to tab when the first line contains one, else
    comma.  ``header`` is auto-detected when None (first row non-numeric).
    ``label_column`` is an index (negative counts from the end) or a header
    name.  ``num_classes`` defaults to max(label) + 1.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        text = fh.read()
    lines = text.splitlines()
    if not any(line.strip() for line in lines):
        raise DataError(f"{path}: empty dataset")
    if delimiter is None:
        delimiter = "\t" if "\t" in lines[0] else ","
    rows = list(csv.reader(lines, delimiter=delimiter))

    first = rows[0]
    if header is None:
        header = not all(_is_number(cell) for cell in first)
    names = [c.strip() for c in first] if header else None
    body = [(i + 1, r) for i, r in enumerate(rows) if r and any(c.strip() for c in r)]
    if header:
        body = body[1:]
    if not body:
        raise DataError(f"{path}: empty dataset")

    width = len(body[0][1])
    if isinstance(label_column, str):
        if names is None or label_column not in names:
            raise DataError(f"label column {label_column!r} not in header")
        label_idx = names.index(label_column)
    else:
        label_idx = label_column % width

    feats, labels = [], []
    for line_no, row in body:
        if len(row) != width:
            raise ParseError(line_no, len(row), f"expected {width} fields, found {len(row)}")
        values = []
        for col, cell in enumerate(row):
            if col == label_idx:
                try:
                    labels.append(int(cell.strip()))
                except ValueError:
                    raise ParseError(line_no, col + 1, f"label {cell!r} is not an integer") from None
                continue
            try:
                value = float(cell)
            except ValueError:
                raise ParseError(line_no, col + 1, f"{cell!r} is not a number") from None
            if not math.isfinite(value):
                raise ParseError(line_no, col + 1, "non-finite value")
            values.append(value)
        feats.append(values)

    labels_arr = np.array(labels, dtype=np.int64)
    k = int(labels_arr.max()) + 1 if num_classes is None else num_classes
    if labels_arr.min() < 0 or labels_arr.max() >= k:
        bad = int(np.flatnonzero((labels_arr < 0) | (labels_arr >= k))[0])
        raise DataError(f"line {body[bad][0]}: label {labels_arr[bad]} outside [0, {k})")
    return LabeledDataset(np.array(feats, dtype=np.float64), labels_arr, k)


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True
