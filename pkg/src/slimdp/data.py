"""Datasets, per-worker shards and deterministic mini-batch streams."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from slimdp import seeds
from slimdp.model import MiniBatch, ModelSpec, init_params, logits


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DataError(f"features must be a non-empty 2-d array, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError("one label per feature row required")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx: np.ndarray) -> Dataset:
        return Dataset(self.features[idx], self.labels[idx], self.class_count)


@dataclass(frozen=True)
class Shard:
    owner: int
    indices: np.ndarray
    dataset: Dataset

    @property
    def size(self) -> int:
        return len(self.indices)


def teacher_model(d: int, classes: int, teacher_seed: int, hidden: int = 6) -> tuple[ModelSpec, np.ndarray]:
    """Frozen random ReLU network used to label synthetic data.

    Output biases are set to minus the mean logit over a calibration sample.
    Without that, the positive mean of the ReLU features hands most inputs to
    whichever class has the largest weight sum.
    """
    spec = ModelSpec((d, hidden, classes), seed=seeds.derive(teacher_seed, seeds.TEACHER))
    w = init_params(spec, dtype=np.float64)
    calib = seeds.rng(teacher_seed, seeds.TEACHER, 1).standard_normal((4096, d))
    out = spec.unpack(w)[-1]
    out[-1] = -logits(spec, w, calib).mean(axis=0)
    return spec, w


def gen_synthetic(
    d: int, classes: int, m: int, teacher_seed: int, noise: float = 0.0, teacher_hidden: int = 6
) -> Dataset:
    """Standard-normal features labelled by a teacher network.

    A ``noise`` fraction of rows (chosen without replacement) gets its label
    resampled uniformly from all classes. ``teacher_hidden`` sets the
    teacher's hidden width, i.e. how hard the labelling function is.
    """
    if classes < 2:
        raise DataError("need at least 2 classes")
    if m < classes:
        raise DataError(f"need m >= classes, got m={m}, classes={classes}")
    if not 0.0 <= noise <= 1.0:
        raise DataError(f"noise must lie in [0, 1], got {noise}")
    if teacher_hidden < 1:
        raise DataError(f"teacher hidden width must be >= 1, got {teacher_hidden}")
    x = seeds.rng(teacher_seed, seeds.FEATURES).standard_normal((m, d)).astype(np.float32)
    spec, w = teacher_model(d, classes, teacher_seed, teacher_hidden)
    y = logits(spec, w, x.astype(np.float64)).argmax(axis=1).astype(np.int64)
    n_noisy = int(round(noise * m))
    if n_noisy:
        gen = seeds.rng(teacher_seed, seeds.NOISE)
        rows = gen.permutation(m)[:n_noisy]
        y[rows] = gen.integers(0, classes, size=n_noisy)
    return Dataset(x, y, classes)


def split_holdout(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Random (train, test) split; ``fraction`` of rows go to test."""
    if not 0.0 < fraction < 1.0:
        raise DataError(f"holdout fraction must lie in (0, 1), got {fraction}")
    n_test = int(round(fraction * len(ds)))
    if not 1 <= n_test < len(ds):
        raise DataError(f"holdout of {n_test} rows from {len(ds)} leaves an empty side")
    perm = seeds.rng(seed, seeds.HOLDOUT).permutation(len(ds))
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


def partition(ds: Dataset, K: int, seed: int) -> list[Shard]:
    """IID split into ``K`` disjoint shards covering every row.

    Sizes differ by at most one; the first ``m % K`` shards get the extra row.
    """
    m = len(ds)
    if K < 1:
        raise DataError(f"worker count must be >= 1, got {K}")
    if K > m:
        raise DataError(f"cannot split {m} rows across {K} workers")
    perm = seeds.rng(seed, seeds.PARTITION).permutation(m)
    base, extra = divmod(m, K)
    shards, start = [], 0
    for k in range(K):
        size = base + (1 if k < extra else 0)
        shards.append(Shard(k, perm[start : start + size], ds))
        start += size
    return shards


def batch_stream(shard: Shard, B: int, seed: int) -> Iterator[MiniBatch]:
    """Endless mini-batches, reshuffled every epoch.

    The final short batch of each epoch is emitted, so one epoch yields exactly
    the shard's rows once each.
    """
    if not 1 <= B <= shard.size:
        raise DataError(f"batch size {B} outside [1, {shard.size}]")
    return _stream(shard, B, seed)


def _stream(shard: Shard, B: int, seed: int) -> Iterator[MiniBatch]:
    feats, labels = shard.dataset.features, shard.dataset.labels
    epoch = 0
    while True:
        order = shard.indices[seeds.rng(seed, seeds.BATCHES, shard.owner, epoch).permutation(shard.size)]
        for start in range(0, shard.size, B):
            rows = order[start : start + B]
            yield MiniBatch(feats[rows], labels[rows])
        epoch += 1


def load_csv(path: str | Path) -> Dataset:
    """Read rows of ``f1,...,fd,label``; class count is ``max(label) + 1``."""
    path = Path(path)
    feats: list[list[float]] = []
    labels: list[int] = []
    d = None
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 2:
                raise DataError(f"{path}:{lineno}: need at least one feature and a label")
            if d is None:
                d = len(row) - 1
            elif len(row) - 1 != d:
                raise DataError(f"{path}:{lineno}: expected {d} features, found {len(row) - 1}")
            try:
                vals = [float(c) for c in row[:-1]]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric feature in {row[:-1]!r}") from None
            try:
                label = int(row[-1].strip())
            except ValueError:
                raise DataError(f"{path}:{lineno}: label {row[-1]!r} is not an integer") from None
            if label < 0:
                raise DataError(f"{path}:{lineno}: negative label {label}")
            if not np.all(np.isfinite(vals)):
                raise DataError(f"{path}:{lineno}: non-finite feature")
            feats.append(vals)
            labels.append(label)
    if not feats:
        raise DataError(f"{path}: no rows")
    y = np.asarray(labels, dtype=np.int64)
    return Dataset(np.asarray(feats, dtype=np.float32), y, int(y.max()) + 1)
