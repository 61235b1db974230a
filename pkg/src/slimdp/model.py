"""Feed-forward ReLU network with softmax cross-entropy and manual backprop.

All parameters live in one flat vector so that the communication layer can
address them by index. Layer ``l`` owns an augmented matrix of shape
``(in_l + 1, out_l)`` stored row-major; rows ``0..in_l-1`` are the weights and
row ``in_l`` is the bias. Layers are laid out back to back in order, so::

    flat = offset[l] + row * out_l + col

The simulator keeps parameters in float32 (the wire precision). Every function
here follows the dtype of ``w``, which lets gradient checks run in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from slimdp import seeds


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    layer_sizes: tuple[int, ...]
    seed: int = 0
    offsets: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ModelError("layer_sizes needs at least 2 entries (input dim and class count)")
        if any(s < 1 for s in sizes):
            raise ModelError(f"layer sizes must be >= 1, got {list(sizes)}")
        object.__setattr__(self, "layer_sizes", sizes)
        offs = [0]
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            offs.append(offs[-1] + (fan_in + 1) * fan_out)
        object.__setattr__(self, "offsets", tuple(offs))

    @property
    def n(self) -> int:
        return self.offsets[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def classes(self) -> int:
        return self.layer_sizes[-1]

    def layer_shape(self, layer: int) -> tuple[int, int]:
        return self.layer_sizes[layer] + 1, self.layer_sizes[layer + 1]

    def unpack(self, w: np.ndarray) -> list[np.ndarray]:
        """Views of ``w`` as the per-layer augmented matrices (no copy)."""
        if w.shape != (self.n,):
            raise ModelError(f"parameter vector has shape {w.shape}, expected ({self.n},)")
        return [
            w[self.offsets[l] : self.offsets[l + 1]].reshape(self.layer_shape(l))
            for l in range(self.n_layers)
        ]


def param_count(layer_sizes: Sequence[int]) -> int:
    return sum((a + 1) * b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


def flat_index(spec: ModelSpec, layer: int, row: int, col: int) -> int:
    """Flat coordinate of ``(layer, row, col)``; ``row == fan_in`` is the bias."""
    rows, cols = spec.layer_shape(layer)
    if not (0 <= row < rows and 0 <= col < cols):
        raise IndexError(f"({layer}, {row}, {col}) outside layer shape {(rows, cols)}")
    return spec.offsets[layer] + row * cols + col


def unflatten_index(spec: ModelSpec, i: int) -> tuple[int, int, int]:
    if not 0 <= i < spec.n:
        raise IndexError(f"flat index {i} outside [0, {spec.n})")
    layer = int(np.searchsorted(spec.offsets, i, side="right")) - 1
    rel = i - spec.offsets[layer]
    cols = spec.layer_sizes[layer + 1]
    return layer, rel // cols, rel % cols


def init_params(spec: ModelSpec, dtype=np.float32) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    gen = seeds.rng(spec.seed, seeds.INIT)
    w = np.zeros(spec.n, dtype=dtype)
    for mat in spec.unpack(w):
        fan_in = mat.shape[0] - 1
        bound = 1.0 / math.sqrt(fan_in)
        mat[:-1] = gen.uniform(-bound, bound, size=(fan_in, mat.shape[1]))
    return w


class MiniBatch(NamedTuple):
    features: np.ndarray
    labels: np.ndarray


def _check_batch(spec: ModelSpec, features: np.ndarray, labels: np.ndarray) -> None:
    if features.ndim != 2 or features.shape[1] != spec.input_dim:
        raise ModelError(f"features have shape {features.shape}, expected (B, {spec.input_dim})")
    if labels.shape != (features.shape[0],):
        raise ModelError(f"{labels.shape[0]} labels for {features.shape[0]} rows")
    if features.shape[0] < 1:
        raise ModelError("empty batch")
    if labels.min() < 0 or labels.max() >= spec.classes:
        raise ModelError(f"label out of range [0, {spec.classes})")
    if not np.all(np.isfinite(features)):
        raise ModelError("non-finite feature value")


def _forward(mats: list[np.ndarray], x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    h = x
    for l, m in enumerate(mats):
        z = h @ m[:-1] + m[-1]
        if l < len(mats) - 1:
            z = np.maximum(z, 0)
        acts.append(z)
        h = z
    return acts


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def logits(spec: ModelSpec, w: np.ndarray, features: np.ndarray) -> np.ndarray:
    return _forward(spec.unpack(w), np.asarray(features, dtype=w.dtype))[-1]


def loss_and_grad(spec: ModelSpec, w: np.ndarray, batch: MiniBatch) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its gradient w.r.t. ``w``."""
    x = np.asarray(batch.features, dtype=w.dtype)
    y = np.asarray(batch.labels)
    _check_batch(spec, x, y)
    if not np.all(np.isfinite(w)):
        raise ModelError("non-finite parameter value")

    mats = spec.unpack(w)
    acts = _forward(mats, x)
    logp = _log_softmax(acts[-1])
    rows = np.arange(x.shape[0])
    loss = -float(logp[rows, y].mean(dtype=np.float64))

    grad = np.empty_like(w)
    gmats = spec.unpack(grad)
    # d loss / d logits = (softmax - onehot) / B
    dz = np.exp(logp)
    dz[rows, y] -= 1
    dz /= x.shape[0]
    for l in range(len(mats) - 1, -1, -1):
        h = acts[l]
        gmats[l][:-1] = h.T @ dz
        gmats[l][-1] = dz.sum(axis=0)
        if l:
            dz = (dz @ mats[l][:-1].T) * (acts[l] > 0)
    return loss, grad


class LocalResult(NamedTuple):
    w_out: np.ndarray
    delta: np.ndarray
    mean_loss: float


def local_train(spec: ModelSpec, w: np.ndarray, batches: Sequence[MiniBatch], lr: float) -> LocalResult:
    """Run ``len(batches)`` plain SGD steps and return ``delta = w_in - w_out``.

    The server rule ``w_global - eta' * delta`` therefore moves along the
    locally descended direction.
    """
    if len(batches) < 1:
        raise ModelError("local_train needs at least one mini-batch")
    if lr < 0:
        raise ModelError(f"learning rate must be >= 0, got {lr}")
    cur = w
    losses = []
    for b in batches:
        loss, g = loss_and_grad(spec, cur, b)
        losses.append(loss)
        cur = cur - lr * g
    return LocalResult(cur, w - cur, math.fsum(losses) / len(losses))


def evaluate(spec: ModelSpec, w: np.ndarray, dataset) -> tuple[float, float]:
    """Mean loss and argmax accuracy over ``dataset`` (anything with features/labels)."""
    x = np.asarray(dataset.features, dtype=w.dtype)
    y = np.asarray(dataset.labels)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ModelError("cannot evaluate on an empty dataset")
    _check_batch(spec, x, y)
    out = logits(spec, w, x)
    logp = _log_softmax(out)
    per_sample = -logp[np.arange(len(y)), y].astype(np.float64)
    # fsum keeps the mean independent of row order
    loss = math.fsum(per_sample.tolist()) / len(y)
    acc = int(np.count_nonzero(out.argmax(axis=1) == y)) / len(y)
    return loss, acc
