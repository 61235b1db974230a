"""Synchronous parameter-server simulation.

One communication round ``t`` runs in four barrier-separated phases:

1. every worker trains ``p`` local SGD steps and builds its push frames
   (these may run on a thread pool);
2. the server decodes all ``K`` frame sets in ascending worker order and
   applies the per-coordinate mean of the contributed updates;
3. every worker pulls its communication set and overwrites those local
   coordinates with the global values;
4. ``t`` advances; for ``slim`` the core is reselected when ``t % q == 0``.

For ``slim`` the round before each reselection (``(t + 1) % q == 0``) pushes
the full update so the server has fresh gradient magnitudes to score with.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from slimdp import seeds
from slimdp.codec import (
    CodecError,
    Kind,
    QuantParams,
    SparseUpdate,
    WireFrame,
    decode_core,
    decode_full,
    decode_kv,
    encode_core,
    encode_full,
    encode_kv,
    quant_decode,
    quant_encode,
)
from slimdp.data import Dataset, partition, batch_stream
from slimdp.model import MiniBatch, ModelSpec, evaluate, init_params, local_train
from slimdp.selection import (
    CoreSet,
    ExplorerSet,
    SignificanceConfig,
    comm_set,
    sample_explorer,
    select_core,
    significance,
)

METHODS = ("plump", "quant", "slim")
AGGREGATES = ("mean", "sum", "max")
GRAD_SOURCES = ("mean", "max")
THREADS_ENV = "SLIMDP_THREADS"


class ConfigError(ValueError):
    pass


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class CostModel:
    latency_s: float = 1e-3
    bandwidth_Bps: float = 1e8
    compute_s: float = 5e-4

    def __post_init__(self):
        if self.latency_s < 0 or self.compute_s < 0:
            raise ConfigError("latency and compute time must be >= 0")
        if self.bandwidth_Bps <= 0:
            raise ConfigError("bandwidth must be positive")


def comm_time(words: int, cost: CostModel) -> float:
    """One message of ``words`` 32-bit words: latency plus transfer time."""
    if words < 0:
        raise ValueError("word count must be >= 0")
    return cost.latency_s + 4 * words / cost.bandwidth_Bps


@dataclass(frozen=True)
class ProtocolConfig:
    method: str
    alpha: float = 0.3
    beta: float = 0.15
    p: int = 1
    q: int = 50
    eta_prime: float = 1.0
    lr: float = 0.05
    lr_decay_every: int = 0
    lr_decay_factor: float = 0.5
    batch_size: int = 32
    workers: int = 4
    seed: int = 0
    quant: QuantParams = QuantParams()
    significance: SignificanceConfig = SignificanceConfig()
    aggregate: str = "mean"
    grad_source: str = "mean"
    full_pull_on_sync: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {{{', '.join(METHODS)}}}, got {self.method!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.beta > self.alpha:
            raise ConfigError("beta must not exceed alpha")
        for name in ("p", "q", "workers", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr < 0 or self.eta_prime < 0:
            raise ConfigError("lr and eta_prime must be >= 0")
        if self.lr_decay_every < 0 or not 0 < self.lr_decay_factor <= 1:
            raise ConfigError("lr_decay_every must be >= 0 and lr_decay_factor in (0, 1]")
        if self.aggregate not in AGGREGATES:
            raise ConfigError(f"aggregate must be one of {AGGREGATES}")
        if self.grad_source not in GRAD_SOURCES:
            raise ConfigError(f"grad_source must be one of {GRAD_SOURCES}")

    def lr_at(self, t: int) -> float:
        if not self.lr_decay_every:
            return self.lr
        return self.lr * self.lr_decay_factor ** (t // self.lr_decay_every)

    def is_sync_round(self, t: int) -> bool:
        """Slim rounds that push the full update ahead of a core reselection."""
        return self.method == "slim" and (t + 1) % self.q == 0


@dataclass
class ServerState:
    global_: np.ndarray
    t: int = 0
    core: CoreSet | None = None
    complement: np.ndarray | None = None
    grad_cache: np.ndarray | None = None

    def set_core(self, core: CoreSet) -> None:
        self.core = core
        self.complement = core.complement()


@dataclass
class WorkerState:
    k: int
    local: np.ndarray
    stream: Iterator[MiniBatch]
    core: CoreSet | None = None
    complement: np.ndarray | None = None
    explorer: ExplorerSet | None = None
    last_loss: float = math.nan
    samples: int = 0

    def cache_core(self, core: CoreSet) -> None:
        self.core = core
        self.complement = core.complement()


@dataclass
class RoundMetrics:
    t: int
    samples: int
    train_loss: float
    push_words: list[int]
    pull_words: list[int]
    sim_comp_seconds: float
    sim_comm_seconds: float
    wall_seconds: float
    key_words: int = 0
    test_loss: float | None = None
    test_accuracy: float | None = None

    @property
    def total_push_words(self) -> int:
        return sum(self.push_words)

    @property
    def total_pull_words(self) -> int:
        return sum(self.pull_words)


def _sparse_at(values: np.ndarray, idx: np.ndarray) -> SparseUpdate:
    return SparseUpdate(idx, values[idx], values.size)


def worker_round(
    ws: WorkerState, core: CoreSet | None, cfg: ProtocolConfig, spec: ModelSpec, t: int
) -> tuple[list[WireFrame], WorkerState]:
    """Local training, exploration and push-frame construction for one worker."""
    batches = [next(ws.stream) for _ in range(cfg.p)]
    res = local_train(spec, ws.local, batches, cfg.lr_at(t))
    ws.local = res.w_out
    ws.last_loss = res.mean_loss
    ws.samples += sum(len(b.labels) for b in batches)
    delta = res.delta

    if cfg.method == "plump":
        return [encode_full(delta, t, ws.k)], ws
    if cfg.method == "quant":
        qseed = seeds.derive(cfg.seed, seeds.QUANT, ws.k, t)
        return [quant_encode(delta, cfg.quant, qseed, t, ws.k)], ws

    if core is None:
        raise ProtocolError(f"worker {ws.k} has no cached core")
    complement = ws.complement if core is ws.core else None
    ws.explorer = sample_explorer(
        spec.n, core, cfg.alpha, cfg.beta, seeds.derive(cfg.seed, seeds.EXPLORE, ws.k, t), ws.k, complement
    )
    if cfg.is_sync_round(t):
        return [encode_full(delta, t, ws.k)], ws
    return [
        encode_core(delta[core.indices], core, t, ws.k),
        encode_kv(_sparse_at(delta, ws.explorer.indices), t, ws.k),
    ], ws


def server_apply(ss: ServerState, frames_by_worker: list[list[WireFrame]], cfg: ProtocolConfig) -> ServerState:
    """Decode every worker's push and move the global model.

    Each coordinate moves by ``eta' * mean`` of the updates of the workers that
    pushed it (or their sum, or the largest-magnitude one, per
    ``cfg.aggregate``); untouched coordinates stay put. Workers are folded in ascending
    order so the float result never depends on scheduling.
    """
    if len(frames_by_worker) != cfg.workers or any(not f for f in frames_by_worker):
        have = sum(1 for f in frames_by_worker if f)
        raise ProtocolError(f"round {ss.t}: barrier needs frames from {cfg.workers} workers, got {have}")
    n = ss.global_.size
    sums = np.zeros(n, dtype=np.float64)
    counts = np.zeros(n, dtype=np.int64)
    # "max" keeps the contributed value of largest magnitude; earlier workers win ties
    peak = np.zeros(n, dtype=np.float64)

    def fold(idx, vals) -> None:
        if cfg.aggregate == "max":
            v = np.asarray(vals, dtype=np.float64)
            cur = peak if idx is None else peak[idx]
            win = (np.abs(v) > np.abs(cur)) | ((counts if idx is None else counts[idx]) == 0)
            if idx is None:
                peak[win] = v[win]
            else:
                peak[idx[win]] = v[win]
        if idx is None:
            sums[:] += vals
            counts[:] += 1
        else:
            sums[idx] += vals
            counts[idx] += 1

    mags: np.ndarray | None = None
    all_full = True
    for k, frames in enumerate(frames_by_worker):
        for f in frames:
            if f.round != ss.t or f.worker != k:
                raise ProtocolError(f"frame for (round {f.round}, worker {f.worker}) in slot (round {ss.t}, worker {k})")
            if f.n != n:
                raise ProtocolError(f"frame built for n={f.n}, model has n={n}")
            if f.kind in (Kind.FULL, Kind.QUANT):
                vals = decode_full(f) if f.kind is Kind.FULL else quant_decode(f)
                fold(None, vals)
                if f.kind is Kind.FULL and cfg.method == "slim":
                    a = np.abs(vals.astype(np.float64))
                    if mags is None:
                        mags = a
                    elif cfg.grad_source == "mean":
                        mags += a
                    else:
                        np.maximum(mags, a, out=mags)
                continue
            all_full = False
            if f.kind is Kind.CORE:
                if ss.core is None:
                    raise ProtocolError("core frame received before any core was selected")
                sp = decode_core(f, ss.core)
            else:
                sp = decode_kv(f)
            fold(sp.indices, sp.values)

    touched = counts > 0
    if cfg.aggregate == "mean":
        upd = sums[touched] / counts[touched]
    elif cfg.aggregate == "sum":
        upd = sums[touched]
    else:
        upd = peak[touched]
    step = (cfg.eta_prime * upd).astype(ss.global_.dtype)
    ss.global_[touched] = ss.global_[touched] - step

    if cfg.method == "slim" and all_full and mags is not None:
        ss.grad_cache = mags / cfg.workers if cfg.grad_source == "mean" else mags
    return ss


def core_selection_round(ss: ServerState, cfg: ProtocolConfig, sig_cfg: SignificanceConfig | None = None) -> CoreSet:
    """Rescore ``|w| + c|g|`` with the cached gradient magnitudes and pick a new core."""
    if ss.grad_cache is None:
        raise ProtocolError(f"core selection at t={ss.t} without cached full-update magnitudes")
    sig_cfg = cfg.significance if sig_cfg is None else sig_cfg
    scores = significance(np.abs(ss.global_), ss.grad_cache, sig_cfg)
    epoch = 0 if ss.core is None else ss.core.epoch + 1
    core = select_core(scores, cfg.beta, epoch)
    ss.set_core(core)
    ss.grad_cache = None
    return core


def bootstrap_core(ss: ServerState, cfg: ProtocolConfig) -> CoreSet:
    """Initial core from parameter magnitude alone (no gradients exist yet)."""
    w_abs = np.abs(ss.global_)
    core = select_core(significance(w_abs, np.zeros_like(w_abs), cfg.significance), cfg.beta, 0)
    ss.set_core(core)
    return core


def pull_frames(ss: ServerState, ws: WorkerState, cfg: ProtocolConfig) -> list[WireFrame]:
    """Frames the server sends back to worker ``ws.k`` for the current round."""
    t, k = ss.t, ws.k
    if cfg.method != "slim" or (cfg.full_pull_on_sync and cfg.is_sync_round(t)):
        return [encode_full(ss.global_, t, k)]
    if ws.explorer is None:
        raise ProtocolError(f"worker {k} pulled before sampling an explorer")
    return [
        encode_core(ss.global_[ss.core.indices], ss.core, t, k),
        encode_kv(_sparse_at(ss.global_, ws.explorer.indices), t, k),
    ]


def worker_pull_merge(ws: WorkerState, frames: list[WireFrame], comm_set_k: np.ndarray | None = None) -> WorkerState:
    """Overwrite the pulled coordinates of the local model; keep the rest.

    ``comm_set_k``, when given, must equal the set of pulled coordinates.
    """
    pulled = []
    full = False
    for f in frames:
        if f.kind is Kind.FULL:
            ws.local = decode_full(f)
            full = True
            continue
        if f.kind is Kind.CORE:
            if ws.core is None:
                raise ProtocolError(f"worker {ws.k} has no cached core")
            sp = decode_core(f, ws.core)
        elif f.kind is Kind.KV:
            sp = decode_kv(f)
        else:
            raise CodecError(f"{f.kind.name} frames are never pulled")
        ws.local[sp.indices] = sp.values
        pulled.append(sp.indices)
    if comm_set_k is not None and not full:
        got = np.sort(np.concatenate(pulled)) if pulled else np.empty(0, dtype=np.uint32)
        if not np.array_equal(got, np.asarray(comm_set_k)):
            raise ProtocolError(f"worker {ws.k} pulled coordinates differ from its communication set")
    return ws


def resolve_threads(requested: int) -> int:
    threads = max(1, int(requested))
    cap = os.environ.get(THREADS_ENV)
    if cap:
        threads = min(threads, max(1, int(cap)))
    return threads


class Simulation:
    """Round-by-round driver; ``step()`` runs one full communication round."""

    def __init__(
        self,
        cfg: ProtocolConfig,
        spec: ModelSpec,
        train: Dataset,
        test: Dataset | None = None,
        cost: CostModel = CostModel(),
        eval_every: int = 0,
        threads: int = 1,
    ):
        if train.dim != spec.input_dim or train.class_count > spec.classes:
            raise ConfigError(
                f"model {list(spec.layer_sizes)} does not fit data with d={train.dim}, "
                f"classes={train.class_count}"
            )
        self.cfg = cfg
        self.spec = spec
        self.test = test
        self.cost = cost
        self.eval_every = eval_every
        self.threads = resolve_threads(threads)

        self.server = ServerState(init_params(spec))
        pending_keys = 0
        if cfg.method == "slim":
            bootstrap_core(self.server, cfg)
            pending_keys = len(self.server.core) * cfg.workers
        self._pending_key_words = pending_keys

        self.workers = []
        for shard in partition(train, cfg.workers, cfg.seed):
            stream = batch_stream(shard, cfg.batch_size, cfg.seed)
            # initial pull of the full model is setup, not a metered round
            ws = WorkerState(shard.owner, self.server.global_.copy(), stream)
            if self.server.core is not None:
                ws.cache_core(self.server.core)
            self.workers.append(ws)
        self.history: list[RoundMetrics] = []
        self.frames_built = 0
        self.words_built = 0

    @property
    def t(self) -> int:
        return self.server.t

    def _push_phase(self) -> list[list[WireFrame]]:
        t = self.server.t

        def job(ws: WorkerState) -> list[WireFrame]:
            frames, _ = worker_round(ws, ws.core, self.cfg, self.spec, t)
            return frames

        if self.threads > 1 and len(self.workers) > 1:
            with ThreadPoolExecutor(max_workers=min(self.threads, len(self.workers))) as pool:
                return list(pool.map(job, self.workers))
        return [job(ws) for ws in self.workers]

    def step(self) -> RoundMetrics:
        start = time.perf_counter()
        cfg, ss = self.cfg, self.server
        pushes = self._push_phase()
        push_words = [sum(f.words for f in fs) for fs in pushes]
        server_apply(ss, pushes, cfg)

        pull_words = []
        n_frames = sum(len(fs) for fs in pushes)
        for ws in self.workers:
            frames = pull_frames(ss, ws, cfg)
            cset = None
            if cfg.method == "slim" and frames[0].kind is not Kind.FULL:
                cset = comm_set(ss.core, ws.explorer)
            worker_pull_merge(ws, frames, cset)
            pull_words.append(sum(f.words for f in frames))
            n_frames += len(frames)
        self.frames_built += n_frames
        self.words_built += sum(push_words) + sum(pull_words)

        ss.t += 1
        key_words, self._pending_key_words = self._pending_key_words, 0
        if cfg.method == "slim" and ss.t % cfg.q == 0:
            core = core_selection_round(ss, cfg)
            for ws in self.workers:
                ws.cache_core(core)
            # the renewed key list is sent once per worker to refill the key caches
            self._pending_key_words = len(core) * cfg.workers

        m = RoundMetrics(
            t=ss.t,
            samples=sum(ws.samples for ws in self.workers),
            train_loss=math.fsum(ws.last_loss for ws in self.workers) / len(self.workers),
            push_words=push_words,
            pull_words=pull_words,
            sim_comp_seconds=cfg.p * self.cost.compute_s,
            sim_comm_seconds=comm_time(max(push_words), self.cost) + comm_time(max(pull_words), self.cost),
            wall_seconds=0.0,
            key_words=key_words,
        )
        if self.test is not None and self.eval_every and (ss.t % self.eval_every == 0):
            m.test_loss, m.test_accuracy = evaluate(self.spec, ss.global_, self.test)
        m.wall_seconds = time.perf_counter() - start
        self.history.append(m)
        return m

    def evaluate_now(self, m: RoundMetrics) -> None:
        if self.test is not None and m.test_accuracy is None:
            m.test_loss, m.test_accuracy = evaluate(self.spec, self.server.global_, self.test)

    def run(self, rounds: int, on_round: Callable[[Simulation, RoundMetrics], None] | None = None) -> list[RoundMetrics]:
        if rounds < 0:
            raise ConfigError("rounds must be >= 0")
        for r in range(rounds):
            m = self.step()
            if r == rounds - 1:
                self.evaluate_now(m)
            if on_round is not None:
                on_round(self, m)
        return self.history


def run_simulation(
    cfg: ProtocolConfig,
    train: Dataset,
    test: Dataset | None,
    spec: ModelSpec,
    rounds: int,
    cost: CostModel = CostModel(),
    eval_every: int = 0,
    threads: int = 1,
) -> list[RoundMetrics]:
    """Run ``rounds`` communication rounds; the last round is always evaluated."""
    return Simulation(cfg, spec, train, test, cost, eval_every, threads).run(rounds)
