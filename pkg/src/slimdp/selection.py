"""Significance scoring, core selection and per-worker exploration.

The communication set of worker ``k`` in a round is the union of the server's
core (top-significance coordinates, refreshed every ``q`` rounds) and the
worker's explorer (a fresh uniform sample from outside the core).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

INDEX_DTYPE = np.uint32


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class SignificanceConfig:
    """``c=None`` means auto-scale; otherwise the fixed gradient weight."""

    c: float | None = None
    epsilon: float = 1e-12

    def __post_init__(self):
        if self.c is not None and self.c < 0:
            raise SelectionError(f"fixed c must be >= 0, got {self.c}")
        if self.epsilon <= 0:
            raise SelectionError("epsilon must be positive")


def index_signature(indices: np.ndarray) -> int:
    """Stable 64-bit hash of a sorted index list."""
    buf = np.ascontiguousarray(indices, dtype="<u4").tobytes()
    digest = hashlib.blake2b(buf, digest_size=8, person=b"slimdp-core").digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True, eq=False)
class CoreSet:
    indices: np.ndarray
    n: int
    epoch: int = 0
    signature: int = field(init=False)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=INDEX_DTYPE)
        if idx.size and (np.any(np.diff(idx.astype(np.int64)) <= 0) or idx[-1] >= self.n):
            raise SelectionError("core indices must be strictly increasing and < n")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "signature", index_signature(idx))

    def __len__(self) -> int:
        return self.indices.size

    def complement(self) -> np.ndarray:
        mask = np.ones(self.n, dtype=bool)
        mask[self.indices] = False
        return np.flatnonzero(mask).astype(INDEX_DTYPE)


@dataclass(frozen=True, eq=False)
class ExplorerSet:
    worker: int
    indices: np.ndarray

    def __len__(self) -> int:
        return self.indices.size


def fraction_size(frac: float, n: int) -> int:
    """``round(frac * n)`` with halves rounded up, clamped to ``[0, n]``."""
    return min(max(math.floor(frac * n + 0.5), 0), n)


def auto_scale_c(w_abs: np.ndarray, g_abs: np.ndarray, epsilon: float = 1e-12) -> float:
    """Weight that brings the mean gradient magnitude to the mean parameter magnitude."""
    if w_abs.size == 0:
        return 0.0
    return float(np.mean(w_abs, dtype=np.float64) / (np.mean(g_abs, dtype=np.float64) + epsilon))


def significance(w_abs: np.ndarray, g_abs: np.ndarray, cfg: SignificanceConfig = SignificanceConfig()) -> np.ndarray:
    """Score ``|w_i| + c |g_i|`` for every coordinate (float64)."""
    w_abs = np.asarray(w_abs, dtype=np.float64)
    g_abs = np.asarray(g_abs, dtype=np.float64)
    if w_abs.shape != g_abs.shape or w_abs.ndim != 1:
        raise SelectionError(f"shape mismatch: {w_abs.shape} vs {g_abs.shape}")
    if np.any(w_abs < 0) or np.any(g_abs < 0):
        raise SelectionError("significance expects magnitudes (non-negative entries)")
    if not (np.all(np.isfinite(w_abs)) and np.all(np.isfinite(g_abs))):
        raise SelectionError("non-finite magnitude")
    if not np.any(g_abs):
        return w_abs.copy()
    c = auto_scale_c(w_abs, g_abs, cfg.epsilon) if cfg.c is None else cfg.c
    return w_abs + c * g_abs


def select_core(scores: np.ndarray, beta: float, epoch: int = 0) -> CoreSet:
    """Top ``round(beta * n)`` scores; ties go to the lower index."""
    if not 0.0 <= beta <= 1.0:
        raise SelectionError(f"beta must lie in [0, 1], got {beta}")
    n = scores.size
    size = fraction_size(beta, n)
    # stable sort on the negated scores keeps lower indices first among ties
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return CoreSet(np.sort(order[:size]), n, epoch)


def explorer_size(n: int, core_size: int, alpha: float, beta: float) -> int:
    return min(fraction_size(alpha - beta, n), n - core_size)


def sample_explorer(
    n: int,
    core: CoreSet,
    alpha: float,
    beta: float,
    seed: int | np.random.Generator,
    worker: int = 0,
    complement: np.ndarray | None = None,
) -> ExplorerSet:
    """Uniform sample without replacement from the coordinates outside ``core``.

    ``complement`` may be passed in to skip recomputing ``core.complement()``
    every round. ``seed`` is an int or an existing Generator.
    """
    if not 0.0 <= beta <= alpha <= 1.0:
        raise SelectionError(f"need 0 <= beta <= alpha <= 1, got alpha={alpha}, beta={beta}")
    if core.n != n:
        raise SelectionError(f"core built for n={core.n}, asked for n={n}")
    size = explorer_size(n, len(core), alpha, beta)
    if size == 0:
        return ExplorerSet(worker, np.empty(0, dtype=INDEX_DTYPE))
    pool = core.complement() if complement is None else complement
    picked = np.random.default_rng(seed).choice(pool.size, size=size, replace=False, shuffle=False)
    return ExplorerSet(worker, np.sort(pool[picked]).astype(INDEX_DTYPE))


def comm_set(core: CoreSet, explorer: ExplorerSet) -> np.ndarray:
    """Sorted union of core and explorer; they must not overlap."""
    union = np.union1d(core.indices, explorer.indices).astype(INDEX_DTYPE)
    if union.size != len(core) + len(explorer):
        raise SelectionError("explorer overlaps the core")
    return union
