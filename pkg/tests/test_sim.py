from __future__ import annotations


import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slimdp.codec import SparseUpdate, encode_core, encode_full, encode_kv
from slimdp.data import batch_stream, gen_synthetic, partition, split_holdout
from slimdp.model import ModelSpec, init_params, local_train
from slimdp.selection import CoreSet, SignificanceConfig, select_core
from slimdp.sim import (
    ConfigError,
    CostModel,
    ProtocolConfig,
    ProtocolError,
    ServerState,
    Simulation,
    WorkerState,
    comm_time,
    core_selection_round,
    resolve_threads,
    server_apply,
    worker_pull_merge,
    worker_round,
)

# one linear layer with (99 + 1) * 10 = 1000 parameters
SPEC_1000 = ModelSpec((99, 10), seed=3)


@pytest.fixture(scope="module")
def data_1000():
    return gen_synthetic(99, 10, 400, teacher_seed=1)


@pytest.fixture(scope="module")
def small_task():
    train, test = split_holdout(gen_synthetic(8, 3, 600, teacher_seed=2), 0.2, 2)
    return ModelSpec((8, 12, 3), seed=5), train, test


def _worker(ds, k=0, B=16):
    (shard,) = partition(ds, 1, seed=0)
    return WorkerState(k, init_params(SPEC_1000), batch_stream(shard, B, seed=0))


def test_slim_push_words_ordinary_and_sync_rounds(data_1000):
    cfg = ProtocolConfig("slim", alpha=0.3, beta=0.15, q=5, workers=1)
    core = select_core(np.abs(init_params(SPEC_1000)), 0.15)
    ws = _worker(data_1000)
    ws.cache_core(core)
    frames, ws = worker_round(ws, core, cfg, SPEC_1000, t=0)
    assert sum(f.words for f in frames) == 450
    frames, ws = worker_round(ws, core, cfg, SPEC_1000, t=4)
    assert sum(f.words for f in frames) == 1000 and len(frames) == 1


def test_plump_and_quant_push_words(data_1000):
    frames, _ = worker_round(_worker(data_1000), None, ProtocolConfig("plump", workers=1), SPEC_1000, 0)
    assert [f.words for f in frames] == [1000]
    frames, _ = worker_round(_worker(data_1000), None, ProtocolConfig("quant", workers=1), SPEC_1000, 0)
    assert [f.words for f in frames] == [282 + 2]


def test_server_mean_rule():
    cfg = ProtocolConfig("slim", alpha=1.0, beta=0.0, workers=2)
    ss = ServerState(np.array([1.0, 5.0], np.float32))
    ss.set_core(CoreSet(np.empty(0, np.uint32), 2))
    f0 = encode_kv(SparseUpdate(np.array([0], np.uint32), np.array([0.1], np.float32), 2), 0, 0)
    f1 = encode_kv(SparseUpdate(np.array([0], np.uint32), np.array([0.3], np.float32), 2), 0, 1)
    server_apply(ss, [[f0], [f1]], cfg)
    assert ss.global_[0] == np.float32(1.0 - 0.2)
    assert ss.global_[1] == 5.0


@pytest.mark.parametrize("aggregate, expected", [("sum", 1.0 - 0.4), ("max", 1.0 - 0.3)])
def test_server_alternative_aggregates(aggregate, expected):
    cfg = ProtocolConfig("slim", alpha=1.0, beta=0.0, workers=2, aggregate=aggregate)
    ss = ServerState(np.array([1.0, 5.0, 2.0], np.float32))
    ss.set_core(CoreSet(np.empty(0, np.uint32), 3))
    f0 = encode_kv(SparseUpdate(np.array([0, 2], np.uint32), np.array([0.1, -0.5], np.float32), 3), 0, 0)
    f1 = encode_kv(SparseUpdate(np.array([0, 2], np.uint32), np.array([0.3, 0.5], np.float32), 3), 0, 1)
    server_apply(ss, [[f0], [f1]], cfg)
    assert ss.global_[0] == pytest.approx(expected, abs=1e-7)
    assert ss.global_[1] == 5.0
    if aggregate == "max":
        # equal magnitudes: the lower worker wins
        assert ss.global_[2] == np.float32(2.5)


def test_server_barrier():
    cfg = ProtocolConfig("plump", workers=2)
    ss = ServerState(np.zeros(3, np.float32))
    with pytest.raises(ProtocolError, match="barrier"):
        server_apply(ss, [[encode_full(np.ones(3, np.float32), 0, 0)]], cfg)
    with pytest.raises(ProtocolError, match="barrier"):
        server_apply(ss, [[encode_full(np.ones(3, np.float32), 0, 0)], []], cfg)
    with pytest.raises(ProtocolError, match="round"):
        server_apply(ss, [[encode_full(np.ones(3, np.float32), 0, 0)], [encode_full(np.ones(3, np.float32), 1, 1)]], cfg)
    assert not np.any(ss.global_)


def test_server_caches_magnitudes_only_on_full_rounds():
    cfg = ProtocolConfig("slim", alpha=0.5, beta=0.5, workers=2)
    ss = ServerState(np.zeros(2, np.float32))
    core = CoreSet(np.array([0]), 2)
    ss.set_core(core)
    server_apply(ss, [[encode_core(np.ones(1, np.float32), core, 0, 0)], [encode_core(np.ones(1, np.float32), core, 0, 1)]], cfg)
    assert ss.grad_cache is None
    ss.t = 1
    server_apply(
        ss,
        [[encode_full(np.array([0.2, -0.4], np.float32), 1, 0)], [encode_full(np.array([-0.6, 0.0], np.float32), 1, 1)]],
        cfg,
    )
    np.testing.assert_allclose(ss.grad_cache, [0.4, 0.2], rtol=1e-6)


def test_core_selection_round_cases():
    w = np.array([0.1, -0.9, 0.5, 0.0], np.float32)
    ss = ServerState(w.copy())
    with pytest.raises(ProtocolError, match="cached"):
        core_selection_round(ss, ProtocolConfig("slim", alpha=0.5, beta=0.5))
    cache = np.array([1.0, 0.0, 0.0, 5.0])
    ss.grad_cache = cache.copy()
    assert len(core_selection_round(ss, ProtocolConfig("slim", alpha=1, beta=1))) == 4
    cfg = ProtocolConfig("slim", alpha=0.5, beta=0.5, significance=SignificanceConfig(c=0.0))
    ss.grad_cache = cache.copy()
    assert core_selection_round(ss, cfg).indices.tolist() == [1, 2]
    a = core_selection_round(ServerState(w.copy(), grad_cache=cache.copy()), ProtocolConfig("slim", alpha=0.5, beta=0.5))
    b = core_selection_round(ServerState(w.copy(), grad_cache=cache.copy()), ProtocolConfig("slim", alpha=0.5, beta=0.5))
    assert np.array_equal(a.indices, b.indices) and a.signature == b.signature
    # auto c: |w| mean 0.375, |g| mean 1.5, so c = 0.25 and scores [.35, .9, .5, 1.25]
    assert a.indices.tolist() == [1, 3]
    assert ss.core.epoch == 1


def _merge_worker(local):
    return WorkerState(0, np.array(local, np.float32), iter(()))


def test_pull_merge_overwrites_only_pulled():
    ws = _merge_worker([1, 2, 3])
    core = CoreSet(np.empty(0, np.uint32), 3)
    ws.cache_core(core)
    frames = [
        encode_core(np.zeros(0, np.float32), core),
        encode_kv(SparseUpdate(np.array([1], np.uint32), np.array([9], np.float32), 3)),
    ]
    worker_pull_merge(ws, frames, np.array([1]))
    assert ws.local.tolist() == [1, 9, 3]


def test_pull_merge_all_and_empty():
    ws = _merge_worker([1, 2, 3])
    core = CoreSet(np.arange(3), 3)
    ws.cache_core(core)
    worker_pull_merge(ws, [encode_core(np.array([7, 8, 9], np.float32), core)], np.arange(3))
    assert ws.local.tolist() == [7, 8, 9]
    empty = CoreSet(np.empty(0, np.uint32), 3)
    ws.cache_core(empty)
    worker_pull_merge(ws, [encode_core(np.zeros(0, np.float32), empty)], np.empty(0, np.uint32))
    assert ws.local.tolist() == [7, 8, 9]


def test_pull_merge_rejects_wrong_set_and_stale_core():
    ws = _merge_worker([1, 2, 3])
    core = CoreSet(np.array([0]), 3)
    ws.cache_core(core)
    with pytest.raises(ProtocolError):
        worker_pull_merge(ws, [encode_core(np.ones(1, np.float32), core)], np.array([0, 2]))
    with pytest.raises(Exception, match="stale"):
        worker_pull_merge(ws, [encode_core(np.ones(1, np.float32), CoreSet(np.array([1]), 3))])


def test_comm_time_examples():
    assert comm_time(450, CostModel(1e-3, 1e9)) == pytest.approx(0.0010018, rel=1e-12)
    assert comm_time(0, CostModel(2e-3, 1e9)) == 2e-3
    cost = CostModel(0.0, 1e8)
    assert comm_time(450, cost) / comm_time(1000, cost) == pytest.approx(2 * 0.3 - 0.15)
    with pytest.raises(ValueError):
        comm_time(-1, cost)
    with pytest.raises(ConfigError):
        CostModel(bandwidth_Bps=0)


@pytest.mark.parametrize(
    "kwargs, msg",
    [
        (dict(method="sgd"), "plump, quant, slim"),
        (dict(method="slim", alpha=0.2, beta=0.3), "beta must not exceed alpha"),
        (dict(method="slim", p=0), "p must be"),
        (dict(method="slim", q=0), "q must be"),
        (dict(method="slim", workers=0), "workers must be"),
        (dict(method="slim", aggregate="median"), "aggregate"),
    ],
)
def test_protocol_config_validation(kwargs, msg):
    with pytest.raises(ConfigError, match=msg):
        ProtocolConfig(**kwargs)


def test_lr_schedule():
    cfg = ProtocolConfig("plump", lr=0.3, lr_decay_every=10, lr_decay_factor=0.5)
    assert [cfg.lr_at(t) for t in (0, 9, 10, 25)] == [0.3, 0.3, 0.15, 0.075]
    assert ProtocolConfig("plump", lr=0.3).lr_at(10_000) == 0.3


def _trajectory(sim, rounds):
    out = []
    for _ in range(rounds):
        sim.step()
        out.append(sim.server.global_.copy())
    return out


@pytest.mark.parametrize("K, p", [(1, 1), (3, 2)])
def test_slim_full_fractions_equals_plump(small_task, K, p):
    spec, train, test = small_task
    common = dict(p=p, q=4, workers=K, seed=7, lr=0.2, batch_size=8)
    a = _trajectory(Simulation(ProtocolConfig("slim", alpha=1, beta=1, **common), spec, train), 12)
    b = _trajectory(Simulation(ProtocolConfig("plump", **common), spec, train), 12)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_plump_single_worker_is_sequential_sgd(small_task):
    spec, train, _ = small_task
    cfg = ProtocolConfig("plump", workers=1, seed=4, lr=0.2, batch_size=16, lr_decay_every=10)
    sim = Simulation(cfg, spec, train)
    (shard,) = partition(train, 1, cfg.seed)
    stream = batch_stream(shard, cfg.batch_size, cfg.seed)
    w = init_params(spec)
    for t in range(40):
        w = local_train(spec, w, [next(stream)], cfg.lr_at(t)).w_out
        sim.step()
        assert np.array_equal(sim.server.global_, w)
        assert np.array_equal(sim.workers[0].local, w)


def test_slim_push_words_over_one_core_period(data_1000):
    train, test = split_holdout(data_1000, 0.25, 1)
    q = 10
    cfg = ProtocolConfig("slim", alpha=0.3, beta=0.15, q=q, workers=2, batch_size=16)
    sim = Simulation(cfg, SPEC_1000, train)
    hist = sim.run(q)
    for m in hist:
        assert len(set(m.push_words)) == 1
        # every pull carries the core values plus explorer key/value pairs
        assert m.pull_words == [450, 450]
    assert sum(m.push_words[0] for m in hist) == (q - 1) * 450 + 1000
    assert hist[0].key_words == 150 * 2 and hist[1].key_words == 0


def test_key_rebroadcast_after_reselection(data_1000):
    train, _ = split_holdout(data_1000, 0.25, 1)
    sim = Simulation(ProtocolConfig("slim", q=3, workers=2, batch_size=16), SPEC_1000, train)
    hist = sim.run(7)
    assert [m.key_words for m in hist] == [300, 0, 0, 300, 0, 0, 300]
    assert sim.server.core.epoch == 2


def test_accounting_conservation(small_task):
    spec, train, test = small_task
    for method in ("slim", "plump", "quant"):
        sim = Simulation(ProtocolConfig(method, q=3, workers=3, batch_size=8), spec, train, test)
        hist = sim.run(8)
        assert sim.words_built == sum(m.total_push_words + m.total_pull_words for m in hist)


def test_timing_model(small_task):
    spec, train, _ = small_task
    cost = CostModel(1e-3, 1e6, 2e-4)
    sim = Simulation(ProtocolConfig("slim", p=2, q=4, workers=2, batch_size=8), spec, train, cost=cost)
    for m in sim.run(5):
        assert m.sim_comp_seconds == 2 * 2e-4
        want = comm_time(max(m.push_words), cost) + comm_time(max(m.pull_words), cost)
        assert m.sim_comm_seconds == want
    m = sim.history[0]
    assert m.push_words == m.pull_words
    assert m.sim_comm_seconds == pytest.approx(2 * (1e-3 + 4 * max(m.push_words) / 1e6))


def test_concurrency_determinism(small_task):
    spec, train, test = small_task
    for method in ("slim", "quant"):
        cfg = ProtocolConfig(method, q=3, workers=4, batch_size=8, seed=11)
        a = Simulation(cfg, spec, train, test, eval_every=2, threads=1)
        b = Simulation(cfg, spec, train, test, eval_every=2, threads=4)
        ha, hb = a.run(9), b.run(9)
        assert np.array_equal(a.server.global_, b.server.global_)
        for x, y in zip(ha, hb):
            assert (x.train_loss, x.test_accuracy, x.push_words, x.sim_comm_seconds) == (
                y.train_loss,
                y.test_accuracy,
                y.push_words,
                y.sim_comm_seconds,
            )


def test_thread_cap_env(monkeypatch):
    monkeypatch.setenv("SLIMDP_THREADS", "2")
    assert resolve_threads(8) == 2
    monkeypatch.delenv("SLIMDP_THREADS")
    assert resolve_threads(8) == 8 and resolve_threads(0) == 1


def test_evaluation_cadence(small_task):
    spec, train, test = small_task
    hist = Simulation(ProtocolConfig("plump", workers=2, batch_size=8), spec, train, test, eval_every=3).run(7)
    assert [m.t for m in hist if m.test_accuracy is not None] == [3, 6, 7]
    assert all(0 <= m.test_accuracy <= 1 for m in hist if m.test_accuracy is not None)


def test_model_must_fit_data(small_task):
    _, train, _ = small_task
    with pytest.raises(ConfigError):
        Simulation(ProtocolConfig("plump"), ModelSpec((5, 3)), train)


def test_full_pull_on_sync_flag(data_1000):
    train, _ = split_holdout(data_1000, 0.25, 1)
    cfg = ProtocolConfig("slim", q=4, workers=2, batch_size=16, full_pull_on_sync=True)
    hist = Simulation(cfg, SPEC_1000, train).run(4)
    assert hist[3].pull_words == [1000, 1000] and hist[2].pull_words == [450, 450]


@settings(max_examples=12)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(0, 1000))
def test_slim_full_equals_plump_property(K, p, q, seed):
    spec = ModelSpec((4, 5, 2), seed=seed)
    train = gen_synthetic(4, 2, 60, teacher_seed=seed)
    common = dict(p=p, q=q, workers=K, seed=seed, lr=0.1, batch_size=5)
    a = Simulation(ProtocolConfig("slim", alpha=1, beta=1, **common), spec, train)
    b = Simulation(ProtocolConfig("plump", **common), spec, train)
    a.run(6)
    b.run(6)
    assert np.array_equal(a.server.global_, b.server.global_)
