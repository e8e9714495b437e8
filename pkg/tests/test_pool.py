import numpy as np
import pytest

from ptr_reweight.numerics import Mlp, NumericsError, ema_blend, make_rng
from ptr_reweight.pool import (FifoQueue, PoolConfig, TargetBatch, TargetEmbedding, build_candidate_set, build_pool,
                               encode_target, encode_targets, gather_ranks, push_queue, select_queue_negatives,
                               shard_indices)


def _emb(uid, rng, task=0, dim=4):
    v = rng.normal(size=dim)
    return TargetEmbedding(v / np.linalg.norm(v), 0, task, uid, rng.normal(size=2))


def _batch(n, rng, dim=4, state_dim=2, uid0=0, n_tasks=3):
    v = rng.normal(size=(n, dim))
    return TargetBatch(v / np.linalg.norm(v, axis=1, keepdims=True), np.zeros(n), rng.integers(0, n_tasks, n),
                       np.arange(uid0, uid0 + n), rng.normal(size=(n, state_dim)))


def test_encode_target_unit_and_degenerate(rng):
    teacher = Mlp([5, 6, 4], rng)
    emb, ok = encode_target(rng.normal(size=5), teacher)
    assert ok and abs(np.linalg.norm(emb.vec) - 1.0) <= 1e-9
    emb, ok = encode_target(rng.normal(size=5), Mlp([5, 6, 4]))
    assert not ok and np.array_equal(emb.vec, np.zeros(4))
    with pytest.raises(NumericsError):
        encode_targets(np.array([[np.nan] * 5]), teacher)


def test_teacher_copy_matches_online(rng):
    online, teacher = Mlp([5, 6, 4], rng), Mlp([5, 6, 4], rng)
    ema_blend(teacher, online, 0.0)
    x = rng.normal(size=(3, 5))
    assert np.array_equal(encode_targets(x, teacher)[0], encode_targets(x, online)[0])


def test_stored_targets_are_detached(rng):
    teacher = Mlp([5, 6, 4], rng)
    x = rng.normal(size=(3, 5))
    vecs, valid = encode_targets(x, teacher)
    q = FifoQueue(8, 4, 2).push(TargetBatch(vecs, np.zeros(3), np.zeros(3), np.arange(3), np.zeros((3, 2))))
    before = q.store.vecs.copy()
    for p in teacher.params():
        p += 1.0
    assert np.array_equal(q.store.vecs, before)


def test_queue_fifo_examples(rng):
    a, b, c = (_emb(i, rng) for i in range(3))
    q = FifoQueue(2, 4, 2)
    push_queue(q, [a])
    push_queue(q, [b, c])
    assert [t.sample_uid for t in q.entries] == [1, 2]
    q = FifoQueue(10, 4, 2)
    push_queue(q, [a, b])
    assert [t.sample_uid for t in q.entries] == [0, 1]


def test_queue_keeps_last_capacity_items(rng):
    q = FifoQueue(7, 4, 2)
    pushed = []
    uid = 0
    for _ in range(30):
        n = int(rng.integers(0, 5))
        q.push(_batch(n, rng, uid0=uid))
        pushed += list(range(uid, uid + n))
        uid += n
        assert list(q.store.uids) == pushed[-7:]


def test_gather_ranks_examples(rng):
    a, b = _emb(0, rng), _emb(1, rng)
    assert gather_ranks([[a, b]]) == [a, b]
    assert gather_ranks([[a], [b]]) == [a, b]
    shards = [[_emb(r * 16 + i, rng) for i in range(16)] for r in range(8)]
    flat = gather_ranks(shards)
    assert len(flat) == 128 and [t.sample_uid for t in flat] == list(range(128))
    parts = [_batch(3, rng, uid0=10 * r) for r in range(3)]
    assert list(gather_ranks(parts).uids) == [0, 1, 2, 10, 11, 12, 20, 21, 22]
    assert [len(s) for s in shard_indices(64, 8)] == [8] * 8


def test_candidate_set_examples(rng):
    q = FifoQueue(16, 4, 2)
    batch = [_emb(i, rng) for i in range(4)]
    for s in batch:
        cs = build_candidate_set(s, batch, [], q, PoolConfig(), rng)
        assert cs.valid and cs.K == 3 and cs.targets[0] is s
        assert s.sample_uid not in [t.sample_uid for t in cs.targets[1:]]
    assert not build_candidate_set(batch[0], batch, [], q, PoolConfig(), rng, valid=False).valid
    with pytest.raises(NumericsError):
        build_candidate_set(batch[0], [batch[0]], [], q, PoolConfig(), rng)


def test_hard_negative_count_and_rule():
    rng = make_rng(4)
    q = FifoQueue(200, 4, 2).push(_batch(200, rng, uid0=1000))
    cfg = PoolConfig(max_queue_negs=64, hard_neg_ratio=0.5)
    task, state = 1, np.array([0.3, -0.2])
    idx = select_queue_negatives(np.array([5]), np.array([task]), state[None], q, cfg, make_rng(9))[0]
    assert len(idx) == 64 and len(set(idx.tolist())) == 64
    plain = select_queue_negatives(np.array([5]), np.array([task]), state[None], q,
                                   PoolConfig(max_queue_negs=64), make_rng(9))[0]
    kept = plain[:32]
    assert np.array_equal(idx[:32], kept)
    hard = idx[32:]
    # the 32 hard negatives are the nearest same-task entries not already drawn
    st = q.store
    pool = [j for j in range(len(st)) if st.task_ids[j] == task and j not in set(kept.tolist())]
    pool.sort(key=lambda j: (np.linalg.norm(st.states[j] - state), st.uids[j]))
    assert hard.tolist() == pool[:32]


def test_pool_never_contains_matched_uid_and_is_deterministic():
    for trial in range(200):
        rng = make_rng(trial, 2)
        n = int(rng.integers(2, 12))
        batch = _batch(n, rng)
        valid = rng.random(n) < 0.8
        valid[:2] = True
        q = FifoQueue(20, 4, 2).push(_batch(int(rng.integers(0, 20)), rng, uid0=int(rng.integers(0, 30))))
        cfg = PoolConfig(max_queue_negs=int(rng.integers(0, 8)), hard_neg_ratio=float(rng.uniform(0, 0.5)),
                         n_virtual_ranks=int(rng.integers(1, 9)))
        pool = build_pool(batch, valid, q, cfg, make_rng(trial, 3))
        again = build_pool(batch, valid, q, cfg, make_rng(trial, 3))
        assert np.array_equal(pool.idx, again.idx)
        for i in range(n):
            if not valid[i]:
                assert not pool.valid[i] and not pool.mask[i].any()
                continue
            rows = pool.idx[i, pool.mask[i]]
            assert rows[0] == i
            assert batch.uids[i] not in pool.bank.uids[rows[1:]]
            # every other valid batch sample is a negative
            assert set(np.flatnonzero(valid)) - {i} <= set(rows[1:].tolist())


def test_pool_matches_per_sample_builder():
    rng = make_rng(11)
    batch = _batch(6, rng)
    valid = np.ones(6, dtype=bool)
    q = FifoQueue(10, 4, 2).push(_batch(8, rng, uid0=50))
    cfg = PoolConfig(max_queue_negs=3)
    pool = build_pool(batch, valid, q, cfg, make_rng(1))
    for i in range(6):
        cs = pool.candidate_set(i)
        assert cs.targets[0].sample_uid == batch.uids[i]
        assert cs.K == 5 + 3
