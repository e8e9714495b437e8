"""Post-action targets and candidate-set construction.

Targets come from an EMA copy of the observation encoder, are L2-normalized
and detached. Each valid sample is scored against its own target (index 0)
and negatives drawn from the rest of the batch (all virtual ranks), a FIFO
queue of earlier targets, and same-task nearest-state hard negatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import L2_EPS, Mlp, NumericsError, l2_normalize


@dataclass(frozen=True)
class TargetEmbedding:
    vec: np.ndarray
    source_id: int
    task_id: int
    sample_uid: int
    state: np.ndarray | None = None


@dataclass
class TargetBatch:
    """Column-wise store of targets; row ``i`` is one :class:`TargetEmbedding`."""

    vecs: np.ndarray
    source_ids: np.ndarray
    task_ids: np.ndarray
    uids: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.vecs = np.asarray(self.vecs, dtype=np.float64)
        self.source_ids = np.asarray(self.source_ids, dtype=np.int64)
        self.task_ids = np.asarray(self.task_ids, dtype=np.int64)
        self.uids = np.asarray(self.uids, dtype=np.int64)
        self.states = np.asarray(self.states, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.uids)

    def __getitem__(self, i: int) -> TargetEmbedding:
        return TargetEmbedding(self.vecs[i].copy(), int(self.source_ids[i]), int(self.task_ids[i]),
                               int(self.uids[i]), self.states[i].copy())

    def take(self, idx) -> "TargetBatch":
        idx = np.asarray(idx, dtype=np.int64)
        return TargetBatch(self.vecs[idx], self.source_ids[idx], self.task_ids[idx], self.uids[idx], self.states[idx])

    @classmethod
    def empty(cls, dim: int, state_dim: int) -> "TargetBatch":
        return cls(np.zeros((0, dim)), [], [], [], np.zeros((0, state_dim)))

    @classmethod
    def from_list(cls, items: list[TargetEmbedding], dim: int | None = None, state_dim: int = 0) -> "TargetBatch":
        if not items:
            return cls.empty(dim or 0, state_dim)
        states = [np.zeros(state_dim) if t.state is None else t.state for t in items]
        return cls(np.stack([t.vec for t in items]), [t.source_id for t in items], [t.task_id for t in items],
                   [t.sample_uid for t in items], np.stack(states))

    @classmethod
    def concat(cls, parts: list["TargetBatch"]) -> "TargetBatch":
        parts = [p for p in parts if p is not None]
        return cls(np.concatenate([p.vecs for p in parts]), np.concatenate([p.source_ids for p in parts]),
                   np.concatenate([p.task_ids for p in parts]), np.concatenate([p.uids for p in parts]),
                   np.concatenate([p.states for p in parts]))


@dataclass
class PoolConfig:
    queue_capacity: int = 1024
    max_queue_negs: int = 64
    n_virtual_ranks: int = 8
    hard_neg_ratio: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.hard_neg_ratio <= 0.5:
            raise ValueError("hard_neg_ratio must lie in [0, 0.5]")


class FifoQueue:
    """Bounded FIFO of past targets; oldest entries are evicted first."""

    def __init__(self, capacity: int = 1024, dim: int = 32, state_dim: int = 4):
        self.capacity = int(capacity)
        self.store = TargetBatch.empty(dim, state_dim)

    def __len__(self) -> int:
        return len(self.store)

    @property
    def entries(self) -> list[TargetEmbedding]:
        return [self.store[i] for i in range(len(self.store))]

    def push(self, batch: TargetBatch | list[TargetEmbedding]) -> "FifoQueue":
        if isinstance(batch, list):
            if not batch:
                return self
            batch = TargetBatch.from_list(batch, state_dim=self.store.states.shape[1])
        merged = TargetBatch.concat([self.store, batch])
        keep = max(len(merged) - self.capacity, 0)
        self.store = merged.take(np.arange(keep, len(merged)))
        return self


def push_queue(q: FifoQueue, batch_targets) -> FifoQueue:
    return q.push(batch_targets)


def gather_ranks(per_rank_targets: list):
    """Concatenate virtual-rank shards in rank order."""
    if per_rank_targets and isinstance(per_rank_targets[0], TargetBatch):
        return TargetBatch.concat(list(per_rank_targets))
    return [t for shard in per_rank_targets for t in shard]


def shard_indices(n: int, n_ranks: int) -> list[np.ndarray]:
    """Split ``range(n)`` into ``n_ranks`` contiguous virtual-rank shards."""
    return [a for a in np.array_split(np.arange(n), max(1, min(n_ranks, n)))]


def encode_targets(future_obs: np.ndarray, teacher: Mlp, present: np.ndarray | None = None):
    """Batched teacher encoding; returns (unit vectors, valid mask).

    Rows with a missing observation (``present`` false) or a degenerate
    (near-zero) encoding are returned as zero vectors and flagged invalid.
    """
    obs = np.asarray(future_obs, dtype=np.float64)
    present = np.ones(obs.shape[0], dtype=bool) if present is None else np.asarray(present, dtype=bool)
    if not np.all(np.isfinite(obs[present])):
        raise NumericsError("non-finite future observation")
    raw = teacher(np.where(present[:, None], obs, 0.0))
    norms = np.linalg.norm(raw, axis=1)
    valid = present & (norms > L2_EPS)
    vecs = np.where(valid[:, None], l2_normalize(raw), 0.0)
    return vecs, valid


def encode_target(future_obs: np.ndarray, teacher: Mlp, source_id: int = 0, task_id: int = 0,
                  sample_uid: int = 0, state: np.ndarray | None = None) -> tuple[TargetEmbedding, bool]:
    """Encode one future observation; the bool is the validity flag."""
    vecs, valid = encode_targets(np.asarray(future_obs, dtype=np.float64)[None], teacher)
    vec = vecs[0].copy()
    vec.setflags(write=False)
    return TargetEmbedding(vec, source_id, task_id, sample_uid, state), bool(valid[0])


@dataclass
class CandidateSet:
    targets: list[TargetEmbedding]
    valid: bool = True

    @property
    def K(self) -> int:
        return max(len(self.targets) - 1, 0)

    @property
    def matrix(self) -> np.ndarray:
        return np.stack([t.vec for t in self.targets])


def select_queue_negatives(uids: np.ndarray, task_ids: np.ndarray, states: np.ndarray,
                           queue: FifoQueue, cfg: PoolConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Per query: indices into ``queue.store`` of the queue negatives.

    Up to ``max_queue_negs`` entries are drawn uniformly without replacement
    among entries whose uid differs from the query. A ``hard_neg_ratio``
    fraction of those draws is then swapped for hard negatives: same task
    first, then smallest state distance, then smallest uid.
    """
    n_q = len(uids)
    store = queue.store
    Q = len(store)
    if Q == 0 or cfg.max_queue_negs <= 0:
        return [np.zeros(0, dtype=np.int64) for _ in range(n_q)]
    eligible = store.uids[None, :] != np.asarray(uids)[:, None]
    keys = rng.random((n_q, Q))
    keys = np.where(eligible, keys, np.inf)
    order = np.argsort(keys, axis=1, kind="stable")
    n_elig = eligible.sum(axis=1)
    out = []
    need_hard = cfg.hard_neg_ratio > 0
    if need_hard:
        # rank queue by (task mismatch, state distance, uid) per query
        by_uid = np.argsort(store.uids, kind="stable")
        dist = np.linalg.norm(states[:, None, :] - store.states[None, by_uid, :], axis=2)
        mismatch = store.task_ids[None, by_uid] != np.asarray(task_ids)[:, None]
        hard_key = dist + np.where(mismatch, 1e12, 0.0)
        hard_key = np.where(eligible[:, by_uid], hard_key, np.inf)
        hard_order = by_uid[np.argsort(hard_key, axis=1, kind="stable")]
    for i in range(n_q):
        n_draw = int(min(cfg.max_queue_negs, n_elig[i]))
        drawn = order[i, :n_draw]
        n_hard = int(np.floor(cfg.hard_neg_ratio * n_draw + 0.5)) if need_hard else 0
        if n_hard == 0:
            out.append(drawn)
            continue
        kept = drawn[:n_draw - n_hard]
        taken = np.zeros(Q, dtype=bool)
        taken[kept] = True
        cand = hard_order[i]
        cand = cand[~taken[cand]][:n_elig[i] - len(kept)]
        out.append(np.concatenate([kept, cand[:n_hard]]))
    return out


def build_candidate_set(sample: TargetEmbedding | None, batch_targets: list[TargetEmbedding],
                        rank_targets: list[TargetEmbedding], queue: FifoQueue, cfg: PoolConfig,
                        rng: np.random.Generator, valid: bool = True) -> CandidateSet:
    """Candidate set for one sample: matched target first, then negatives.

    ``batch_targets`` are the sample's own shard, ``rank_targets`` the other
    virtual ranks; both may contain the sample itself, which is removed by uid.
    """
    if sample is None or not valid:
        return CandidateSet([], valid=False)
    negs = [t for t in list(batch_targets) + list(rank_targets) if t.sample_uid != sample.sample_uid]
    state = np.zeros(queue.store.states.shape[1]) if sample.state is None else sample.state
    q_idx = select_queue_negatives(np.array([sample.sample_uid]), np.array([sample.task_id]),
                                   np.asarray(state, dtype=np.float64)[None], queue, cfg, rng)[0]
    negs += [queue.store[j] for j in q_idx]
    if not negs:
        raise NumericsError("candidate pool has no negatives")
    return CandidateSet([sample] + negs, valid=True)


@dataclass
class CandidatePool:
    """Index form of the candidate sets of a whole batch.

    ``bank`` holds the batch targets followed by the queue snapshot;
    ``idx[i]`` lists bank rows for sample ``i`` (column 0 = matched), padded
    with ``-1`` where ``mask`` is false.
    """

    bank: TargetBatch
    idx: np.ndarray
    mask: np.ndarray
    valid: np.ndarray
    n_batch: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def sizes(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def candidate_set(self, i: int) -> CandidateSet:
        if not self.valid[i]:
            return CandidateSet([], valid=False)
        return CandidateSet([self.bank[j] for j in self.idx[i, self.mask[i]]], valid=True)


def build_pool(batch: TargetBatch, valid: np.ndarray, queue: FifoQueue, cfg: PoolConfig,
               rng: np.random.Generator) -> CandidatePool:
    """Vectorized :func:`build_candidate_set` for every sample of a batch."""
    n = len(batch)
    valid = np.asarray(valid, dtype=bool)
    shards = shard_indices(n, cfg.n_virtual_ranks)
    order = np.concatenate(shards) if shards else np.zeros(0, dtype=np.int64)
    q_idx = select_queue_negatives(batch.uids, batch.task_ids, batch.states, queue, cfg, rng)
    rows = []
    for i in range(n):
        if not valid[i]:
            rows.append(np.zeros(0, dtype=np.int64))
            continue
        others = order[valid[order] & (batch.uids[order] != batch.uids[i])]
        qn = n + q_idx[i]
        if len(others) + len(qn) == 0:
            raise NumericsError("candidate pool has no negatives")
        rows.append(np.concatenate([[i], others, qn]).astype(np.int64))
    width = max((len(r) for r in rows), default=1)
    idx = np.full((n, max(width, 1)), -1, dtype=np.int64)
    for i, r in enumerate(rows):
        idx[i, :len(r)] = r
    bank = TargetBatch.concat([batch, queue.store]) if len(queue) else batch
    return CandidatePool(bank, idx, idx >= 0, valid, n_batch=n)
