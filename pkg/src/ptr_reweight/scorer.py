"""Identification posterior over a candidate pool and the PTR score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DTYPE, Mlp, NumericsError, log_sum_exp, softmax
from .pool import CandidatePool, CandidateSet

P0_FLOOR = 1e-30


class QueryHead:
    """Two-layer MLP mapping concat(h, e) into the target space."""

    def __init__(self, h_dim: int, e_dim: int, out_dim: int, hidden: int, rng: np.random.Generator):
        self.net = Mlp([h_dim + e_dim, hidden, out_dim], rng)
        self.h_dim = h_dim
        self.e_dim = e_dim
        assert self.net.n_layers == 2

    def params(self):
        return self.net.params()

    def grads(self):
        return self.net.grads()


@dataclass
class ScorerConfig:
    tau_score: float = 0.12
    logit_clamp: float = 20.0
    tau_min: float = 0.03
    tau_max: float = 0.20

    def __post_init__(self):
        if not self.tau_min <= self.tau_score <= self.tau_max:
            raise ValueError(f"tau_score={self.tau_score} outside [{self.tau_min}, {self.tau_max}]")


@dataclass
class ScorerOutput:
    logits: np.ndarray
    posterior: np.ndarray
    T: float
    margin: float
    top1: bool
    pool_size: int
    valid: bool = True
    floored: bool = False


def query(h: np.ndarray, e: np.ndarray, head: QueryHead):
    """u = f(h, e); returns (u, cache)."""
    h = np.asarray(h, dtype=DTYPE)
    e = np.asarray(e, dtype=DTYPE)
    if h.shape[-1] != head.h_dim or e.shape[-1] != head.e_dim:
        raise NumericsError("query input dims do not match the head")
    return head.net.forward(np.concatenate([h, e], axis=-1))


def query_backward(head: QueryHead, cache, du: np.ndarray):
    dx = head.net.backward(cache, du)
    return dx[..., :head.h_dim], dx[..., head.h_dim:]


def _unit_query(u: np.ndarray):
    n = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise NumericsError("zero-norm query")
    return u / n, n


def logits(u: np.ndarray, Y: CandidateSet, cfg: ScorerConfig) -> np.ndarray:
    """d_i = clamp(cos(u, y_i) / tau, +-clamp) over one candidate set."""
    if not Y.valid:
        raise NumericsError("logits requested for an invalid candidate set")
    uh, _ = _unit_query(np.asarray(u, dtype=DTYPE))
    Ym = Y.matrix
    yn = np.linalg.norm(Ym, axis=1, keepdims=True)
    cos = (Ym / np.where(yn > 0, yn, 1.0)) @ uh
    return np.clip(cos / cfg.tau_score, -cfg.logit_clamp, cfg.logit_clamp)


def posterior(d: np.ndarray) -> np.ndarray:
    return softmax(d)


def ptr_score(p0: float, pool_size: int) -> tuple[float, bool]:
    """T = log(p0 * |Y|); returns (T, floored) where floored marks p0 < 1e-30."""
    if pool_size < 2:
        raise NumericsError("pool must contain at least one negative")
    floored = p0 < P0_FLOOR
    return float(np.log(max(p0, P0_FLOOR) * pool_size)), floored


def id_loss(post: np.ndarray) -> float:
    return float(-np.log(max(post[0], P0_FLOOR)))


def mean_id_loss(outputs: list[ScorerOutput]) -> float:
    """Mean of -log p0 over valid samples; invalid ones are left out."""
    vals = [id_loss(o.posterior) for o in outputs if o.valid]
    return float(np.mean(vals)) if vals else 0.0


def score(u: np.ndarray, Y: CandidateSet, cfg: ScorerConfig) -> ScorerOutput:
    if not Y.valid:
        return ScorerOutput(np.zeros(0), np.zeros(0), 0.0, 0.0, False, 0, valid=False)
    d = logits(u, Y, cfg)
    p = posterior(d)
    T, floored = ptr_score(float(p[0]), len(d))
    return ScorerOutput(d, p, T, float(d[0] - np.max(d[1:])), bool(d[0] > np.max(d[1:])), len(d),
                        floored=floored)


def derangement_shift(n: int, rng: np.random.Generator) -> np.ndarray:
    """Cyclic shift by a random nonzero offset: a permutation with no fixed point."""
    if n < 2:
        return np.arange(n)
    k = int(rng.integers(1, n))
    return (np.arange(n) + k) % n


def batch_stats(outputs: list[ScorerOutput]) -> tuple[float, float, float, float]:
    """(accuracy, mean margin, mean T, valid ratio); accuracy etc. over valid samples."""
    if not outputs:
        return 0.0, 0.0, 0.0, 0.0
    valid = [o for o in outputs if o.valid]
    if not valid:
        return 0.0, 0.0, 0.0, 0.0
    acc = sum(o.top1 for o in valid) / len(valid)
    return (float(acc), float(np.mean([o.margin for o in valid])), float(np.mean([o.T for o in valid])),
            len(valid) / len(outputs))


# ---------------------------------------------------------------- batched path

@dataclass
class PoolScores:
    d: np.ndarray  # (N, W) clamped logits, -inf on padding
    post: np.ndarray
    T: np.ndarray
    margin: np.ndarray
    top1: np.ndarray
    valid: np.ndarray
    sizes: np.ndarray
    log_p0: np.ndarray
    # backward state
    uh: np.ndarray
    un: np.ndarray
    cand: np.ndarray
    open_: np.ndarray
    tau: float

    def outputs(self) -> list[ScorerOutput]:
        out = []
        for i in range(len(self.valid)):
            if not self.valid[i]:
                out.append(ScorerOutput(np.zeros(0), np.zeros(0), 0.0, 0.0, False, 0, valid=False))
                continue
            k = int(self.sizes[i])
            out.append(ScorerOutput(self.d[i, :k].copy(), self.post[i, :k].copy(), float(self.T[i]),
                                    float(self.margin[i]), bool(self.top1[i]), k))
        return out


def score_pool(u: np.ndarray, pool: CandidatePool, cfg: ScorerConfig, tau: float | None = None) -> PoolScores:
    """Logits, posterior, PTR score, margin and top-1 for every sample at once.

    Rows of invalid samples carry a dummy single-entry pool and are masked
    out by ``valid``.
    """
    tau = cfg.tau_score if tau is None else tau
    valid = pool.valid
    mask = pool.mask.copy()
    mask[~valid, 0] = True  # dummy entry keeps rows finite
    safe_idx = np.where(mask, pool.idx, 0)
    cand = pool.bank.vecs[safe_idx]  # (N, W, dy)
    u = np.asarray(u, dtype=DTYPE)
    un = np.linalg.norm(u, axis=1, keepdims=True)
    if np.any(un[valid] == 0):
        raise NumericsError("zero-norm query")
    uh = u / np.where(un > 0, un, 1.0)
    raw = np.einsum("nd,nwd->nw", uh, cand) / tau
    d = np.clip(raw, -cfg.logit_clamp, cfg.logit_clamp)
    open_ = (np.abs(raw) < cfg.logit_clamp) & mask
    d = np.where(mask, d, -np.inf)
    lse = log_sum_exp(d, axis=1)
    post = np.where(mask, np.exp(d - lse[:, None]), 0.0)
    sizes = mask.sum(axis=1)
    log_p0 = np.maximum(d[:, 0] - lse, np.log(P0_FLOOR))
    T = np.where(valid, log_p0 + np.log(np.maximum(sizes, 1)), 0.0)
    if d.shape[1] > 1:
        best_neg = np.max(d[:, 1:], axis=1)
    else:
        best_neg = np.full(len(d), -np.inf)
    margin = np.where(valid & np.isfinite(best_neg), d[:, 0] - best_neg, 0.0)
    top1 = valid & (d[:, 0] > best_neg)
    return PoolScores(d, post, T, margin, top1, valid, np.where(valid, sizes, 0), log_p0,
                      uh, un, cand, open_, tau)


def logits_backward(s: PoolScores, dd: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the raw query u given dL/dd (zero on padding)."""
    g = np.where(s.open_, dd, 0.0) / s.tau
    duh = np.einsum("nw,nwd->nd", g, s.cand)
    du = (duh - s.uh * np.sum(s.uh * duh, axis=1, keepdims=True)) / np.where(s.un > 0, s.un, 1.0)
    return np.where(s.valid[:, None], du, 0.0)


def id_loss_batch(s: PoolScores, sample_scale: np.ndarray | None = None):
    """Mean of -log p0 over valid samples and dL/dd.

    ``sample_scale`` multiplies each sample's term (offset discount) before
    averaging.
    """
    n_valid = int(s.valid.sum())
    if n_valid == 0:
        return 0.0, np.zeros_like(s.post)
    scale = np.ones(len(s.valid)) if sample_scale is None else np.asarray(sample_scale, dtype=DTYPE)
    scale = np.where(s.valid, scale, 0.0)
    loss = float(np.sum(scale * -s.log_p0) / n_valid)
    onehot = np.zeros_like(s.post)
    onehot[:, 0] = 1.0
    dd = (s.post - onehot) * (scale / n_valid)[:, None]
    return loss, dd


def matched_logit(u: np.ndarray, y0: np.ndarray, cfg: ScorerConfig, tau: float):
    un = np.linalg.norm(u, axis=1, keepdims=True)
    uh = u / np.where(un > 0, un, 1.0)
    raw = np.sum(uh * y0, axis=1) / tau
    d = np.clip(raw, -cfg.logit_clamp, cfg.logit_clamp)
    return d, (uh, un, np.abs(raw) < cfg.logit_clamp, y0, tau)


def matched_logit_backward(cache, dd: np.ndarray) -> np.ndarray:
    uh, un, open_, y0, tau = cache
    g = np.where(open_, dd, 0.0)[:, None] / tau
    duh = g * y0
    return (duh - uh * np.sum(uh * duh, axis=1, keepdims=True)) / np.where(un > 0, un, 1.0)


def rank_loss_from_logits(d_pos: np.ndarray, d_neg: np.ndarray, valid: np.ndarray):
    """-mean log sigmoid(d+ - d-) over valid samples; returns (loss, dL/d(d+ - d-))."""
    n = int(np.sum(valid))
    if n == 0:
        return 0.0, np.zeros_like(d_pos)
    x = d_pos - d_neg
    # -log sigmoid(x) = softplus(-x)
    per = np.logaddexp(0.0, -x)
    loss = float(np.sum(np.where(valid, per, 0.0)) / n)
    grad = np.where(valid, -1.0 / (1.0 + np.exp(x)), 0.0) / n
    return loss, grad


def rank_loss(h: np.ndarray, e: np.ndarray, y0: np.ndarray, head: QueryHead, cfg: ScorerConfig,
              rng: np.random.Generator, valid: np.ndarray | None = None, tau: float | None = None):
    """Action-sensitivity ranking loss on a batch; returns (loss, flagged).

    ``flagged`` is true for a batch of one, where no permutation exists.
    """
    n = len(h)
    if n < 2:
        return 0.0, True
    tau = cfg.tau_score if tau is None else tau
    valid = np.ones(n, dtype=bool) if valid is None else valid
    perm = derangement_shift(n, rng)
    u_pos, _ = query(h, e, head)
    u_neg, _ = query(h, e[perm], head)
    d_pos, _ = matched_logit(u_pos, y0, cfg, tau)
    d_neg, _ = matched_logit(u_neg, y0, cfg, tau)
    loss, _ = rank_loss_from_logits(d_pos, d_neg, valid)
    return loss, False
