import numpy as np
import pytest

from ptr_reweight.bench.policy import ModelConfig, StepBatch, ToyPolicy
from ptr_reweight.numerics import make_rng
from ptr_reweight.pool import FifoQueue, PoolConfig, TargetBatch, build_pool, encode_targets
from ptr_reweight.scorer import derangement_shift

TINY = ModelConfig(d=6, target_dim=5, instr_dim=3, n_tokens=2, chunk_len=4, enc_hidden=5, trunk_hidden=5,
                   proj_hidden=4, head_hidden=6, query_hidden=5, lambda_ent=0.3, lambda_div=0.2)


def tiny_setup(seed: int, cfg: ModelConfig = TINY, n: int = 6):
    """A small policy plus one fully populated step batch (with queue and hard negatives)."""
    rng = make_rng(seed, 12345)
    model = ToyPolicy(cfg, rng)
    obs = rng.normal(size=(n, cfg.obs_dim))
    state = rng.normal(size=(n, cfg.state_dim))
    instr = rng.integers(0, cfg.n_tasks, n)
    chunk = rng.normal(size=(n, cfg.chunk_len, cfg.action_dim))
    z_in = rng.normal(size=(n, cfg.n_tokens, cfg.d))
    first = rng.random(n) < 0.5
    fut = rng.normal(size=(n, cfg.obs_dim))
    y, valid = encode_targets(fut, model.teacher)
    valid[n // 2] = False
    y[n // 2] = 0.0
    tb = TargetBatch(y, np.zeros(n), instr, np.arange(n), state)
    q = FifoQueue(10, cfg.target_dim, cfg.state_dim)
    qv = rng.normal(size=(7, cfg.target_dim))
    q.push(TargetBatch(qv / np.linalg.norm(qv, axis=1, keepdims=True), np.zeros(7), rng.integers(0, cfg.n_tasks, 7),
                       np.arange(100, 107), rng.normal(size=(7, cfg.state_dim))))
    pool = build_pool(tb, valid, q, PoolConfig(max_queue_negs=3, hard_neg_ratio=0.34), rng)
    batch = StepBatch(obs, state, instr, chunk, z_in, first, y, valid, pool,
                      rng.normal(size=(n, cfg.flat_action)), rng.beta(1.5, 1.0, n), derangement_shift(n, rng))
    weights = rng.uniform(0.3, 3.0, n)
    return model, batch, weights


@pytest.fixture
def rng():
    return make_rng(0, 777)
