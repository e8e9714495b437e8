"""Toy policy with a flow-matching action head, plus the PTR side modules.

Layout of one forward pass for a batch of chunks::

    obs --obs_enc--> feat ┐
    instruction --emb---> ├─ trunk ─> h ──┬─ head(x_sigma, sigma, h, s) -> velocity
    belief tokens z ------┘               ├─ H = h + pos_emb          (per-step context)
                                          └─ E = act_proj(a_i, s, h)   (action channel)
    e = mean_i E;  u = query_head(h, e);  z_next = sg(tokenizer(H, E))

The target encoder is an EMA copy of ``obs_enc``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics import DTYPE, Mlp, ema_blend
from ..pool import CandidatePool
from ..scorer import (QueryHead, ScorerConfig, id_loss_batch, logits_backward, matched_logit,
                      matched_logit_backward, query, query_backward, rank_loss_from_logits, score_pool)
from ..tokenizer import TokenizerParams, tokenizer_backward, tokenizer_forward


@dataclass
class ModelConfig:
    obs_dim: int = 16
    state_dim: int = 4
    n_tasks: int = 4
    chunk_len: int = 16
    action_dim: int = 2
    d: int = 32
    target_dim: int = 32
    instr_dim: int = 8
    n_tokens: int = 4
    enc_hidden: int = 64
    trunk_hidden: int = 64
    proj_hidden: int = 32
    head_hidden: int = 128
    query_hidden: int = 64
    tau_tok: float = 1.0
    lambda_ent: float = 1e-3
    lambda_div: float = 1e-3
    use_belief: bool = True

    @property
    def flat_action(self) -> int:
        return self.chunk_len * self.action_dim


class ToyPolicy:
    """All trainable pieces plus the EMA target encoder."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d
        self.obs_enc = Mlp([cfg.obs_dim, cfg.enc_hidden, cfg.target_dim], rng)
        self.instr_emb = rng.normal(0.0, 0.5, size=(cfg.n_tasks, cfg.instr_dim))
        trunk_in = cfg.target_dim + cfg.instr_dim + cfg.n_tokens * d
        self.trunk = Mlp([trunk_in, cfg.trunk_hidden, d], rng)
        self.pos_emb = rng.normal(0.0, 0.1, size=(cfg.chunk_len, d))
        self.act_proj = Mlp([cfg.action_dim + cfg.state_dim + d, cfg.proj_hidden, d], rng)
        self.head = Mlp([cfg.flat_action + 1 + d + cfg.state_dim, cfg.head_hidden, cfg.head_hidden,
                         cfg.flat_action], rng)
        self.query_head = QueryHead(d, d, cfg.target_dim, cfg.query_hidden, rng)
        self.tokenizer = TokenizerParams.init(d, cfg.n_tokens, rng, tau_tok=cfg.tau_tok,
                                              lambda_ent=cfg.lambda_ent, lambda_div=cfg.lambda_div)
        self.teacher = self.obs_enc.copy()
        # fixed per-dimension action normalization (set from data, not trained)
        self.act_mean = np.zeros(cfg.action_dim)
        self.act_std = np.ones(cfg.action_dim)
        self.grads_extra = {"instr_emb": np.zeros_like(self.instr_emb), "pos_emb": np.zeros_like(self.pos_emb)}

    # -- parameter registry -------------------------------------------------
    def named_params(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        out = []
        for name, net in (("obs_enc", self.obs_enc), ("trunk", self.trunk), ("act_proj", self.act_proj),
                          ("head", self.head), ("query", self.query_head.net)):
            for k, (p, g) in enumerate(zip(net.params(), net.grads())):
                out.append((f"{name}.{k}", p, g))
        out.append(("instr_emb", self.instr_emb, self.grads_extra["instr_emb"]))
        out.append(("pos_emb", self.pos_emb, self.grads_extra["pos_emb"]))
        for k, p in self.tokenizer.named().items():
            out.append((f"tok.{k}", p, self.tokenizer.grads[k]))
        return out

    def params(self) -> list[np.ndarray]:
        return [p for _, p, _ in self.named_params()]

    def grads(self) -> list[np.ndarray]:
        return [g for _, _, g in self.named_params()]

    def scorer_param_names(self) -> list[str]:
        return [n for n, _, _ in self.named_params() if n.startswith("query.")]

    def zero_grad(self) -> None:
        for g in self.grads():
            g.fill(0.0)

    def set_action_stats(self, chunks: np.ndarray, floor: float = 1e-3) -> None:
        flat = np.asarray(chunks).reshape(-1, self.cfg.action_dim)
        self.act_mean = flat.mean(axis=0)
        self.act_std = np.maximum(flat.std(axis=0), floor)

    def normalize(self, chunk: np.ndarray) -> np.ndarray:
        return (chunk - self.act_mean) / self.act_std

    def snapshot(self) -> dict[str, np.ndarray]:
        snap = {n: p.copy() for n, p, _ in self.named_params()}
        snap["act_mean"], snap["act_std"] = self.act_mean.copy(), self.act_std.copy()
        for k, p in enumerate(self.teacher.params()):
            snap[f"teacher.{k}"] = p.copy()
        return snap

    def load(self, snap: dict[str, np.ndarray]) -> None:
        for n, p, _ in self.named_params():
            p[...] = snap[n]
        for k, p in enumerate(self.teacher.params()):
            p[...] = snap[f"teacher.{k}"]
        self.act_mean, self.act_std = snap["act_mean"].copy(), snap["act_std"].copy()

    def update_teacher(self, mu: float) -> None:
        ema_blend(self.teacher, self.obs_enc, mu)

    # -- forward pieces -----------------------------------------------------
    def belief_input(self, z: np.ndarray) -> np.ndarray:
        if not self.cfg.use_belief:
            return np.zeros((z.shape[0], self.cfg.n_tokens * self.cfg.d))
        return z.reshape(z.shape[0], -1)

    def trunk_forward(self, obs, instr, z):
        feat, c_enc = self.obs_enc.forward(obs)
        x = np.concatenate([feat, self.instr_emb[instr], self.belief_input(z)], axis=1)
        h, c_trunk = self.trunk.forward(x)
        return h, (c_enc, c_trunk)

    def action_tokens(self, chunk, state, h):
        N, L, _ = chunk.shape
        x = np.concatenate([self.normalize(chunk), np.broadcast_to(state[:, None, :], (N, L, state.shape[1])),
                            np.broadcast_to(h[:, None, :], (N, L, h.shape[1]))], axis=2)
        return self.act_proj.forward(x)

    def context_tokens(self, h):
        return h[:, None, :] + self.pos_emb[None]

    def head_input(self, x_sigma, sigma, h, state):
        return np.concatenate([x_sigma, sigma[:, None], h, state], axis=1)

    def velocity(self, x_sigma, sigma, h, state):
        return self.head(self.head_input(x_sigma, sigma, h, state))

    def next_tokens(self, h, chunk, state):
        """No-gradient belief update used by the recursion and at inference."""
        E, _ = self.action_tokens(chunk, state, h)
        z_next, _, _ = tokenizer_forward(self.context_tokens(h), E, self.tokenizer)
        return z_next.tokens

    def sample_chunk(self, obs, instr, z, state, rng, n_steps: int = 4):
        """Euler-integrate the learned velocity from noise (sigma: 0 -> 1)."""
        h, _ = self.trunk_forward(obs, instr, z)
        N = obs.shape[0]
        x = rng.normal(size=(N, self.cfg.flat_action))
        for k in range(n_steps):
            sigma = np.full(N, k / n_steps)
            x = x + self.velocity(x, sigma, h, state) / n_steps
        x = x.reshape(N, self.cfg.chunk_len, self.cfg.action_dim)
        return x * self.act_std + self.act_mean, h


@dataclass
class StepBatch:
    """Everything one optimization step consumes, with its randomness frozen."""

    obs: np.ndarray
    state: np.ndarray
    instr: np.ndarray
    chunk: np.ndarray
    z_in: np.ndarray  # (N, M, d) belief tokens entering each chunk (constants)
    first: np.ndarray  # rows whose tokens are z_init (gradient flows)
    targets: np.ndarray  # (N, dy) matched targets (constants)
    valid: np.ndarray
    pool: CandidatePool
    eps: np.ndarray
    sigma: np.ndarray
    perm: np.ndarray
    id_scale: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


@dataclass
class StepResult:
    total: float
    act: float
    act_unweighted: float
    idl: float
    rank: float
    tok: float
    per_sample_act: np.ndarray
    scores: object
    norm_weights: np.ndarray


def forward_backward(model: ToyPolicy, b: StepBatch, weight_fn, scorer_cfg: ScorerConfig, tau: float,
                     lambda_id: float = 0.05, lambda_rank: float = 0.25, backward: bool = True) -> StepResult:
    """Composite loss and its gradients (accumulated into ``model`` grads).

    ``weight_fn(scores) -> mixed weights`` is evaluated on the detached PTR
    scores; the result only rescales per-sample action-loss gradients.
    """
    cfg = model.cfg
    N = b.obs.shape[0]
    z = np.where(b.first[:, None, None], model.tokenizer.z_init[None], b.z_in)
    h, (c_enc, c_trunk) = model.trunk_forward(b.obs, b.instr, z)

    # action loss (flow matching)
    a = model.normalize(b.chunk).reshape(N, -1)
    x_sigma = b.sigma[:, None] * a + (1.0 - b.sigma[:, None]) * b.eps
    v, c_head = model.head.forward(model.head_input(x_sigma, b.sigma, h, b.state))
    resid = v - (a - b.eps)
    per_act = np.sum(resid ** 2, axis=1)

    # action channel, query, scores
    E, c_proj = model.action_tokens(b.chunk, b.state, h)
    e = E.mean(axis=1)
    u, c_q = query(h, e, model.query_head)
    scores = score_pool(u, b.pool, scorer_cfg, tau)
    idl, dd = id_loss_batch(scores, b.id_scale)

    e_neg = e[b.perm]
    u_neg, c_qn = query(h, e_neg, model.query_head)
    d_pos, c_mp = matched_logit(u, b.targets, scorer_cfg, tau)
    d_neg, c_mn = matched_logit(u_neg, b.targets, scorer_cfg, tau)
    rank_valid = b.valid if N >= 2 else np.zeros(N, dtype=bool)
    rank, d_gap = rank_loss_from_logits(d_pos, d_neg, rank_valid)

    # belief tokenizer (current step only)
    H = model.context_tokens(h)
    _, l_tok_rows, c_tok = tokenizer_forward(H, E, model.tokenizer)
    tok = float(np.mean(l_tok_rows))

    w = np.asarray(weight_fn(scores), dtype=DTYPE)
    wn = w / np.sum(w)
    act = float(np.sum(wn * per_act))
    total = act + lambda_id * idl + lambda_rank * rank + tok
    result = StepResult(total, act, float(np.mean(per_act)), idl, rank, tok, per_act, scores, wn)
    if not backward:
        return result

    # ---- backward
    dh = np.zeros_like(h)
    dx_head = model.head.backward(c_head, 2.0 * resid * wn[:, None])
    F = cfg.flat_action
    dh += dx_head[:, F + 1:F + 1 + cfg.d]

    du = logits_backward(scores, lambda_id * dd)
    du += matched_logit_backward(c_mp, lambda_rank * d_gap)
    du_neg = matched_logit_backward(c_mn, -lambda_rank * d_gap)
    dh_q, de = query_backward(model.query_head, c_q, du)
    dh_qn, de_neg = query_backward(model.query_head, c_qn, du_neg)
    dh += dh_q + dh_qn
    np.add.at(de, b.perm, de_neg)

    dC, dA = tokenizer_backward(c_tok, model.tokenizer, np.full(N, 1.0 / N))
    dh += dC.sum(axis=1)
    model.grads_extra["pos_emb"] += dC.sum(axis=0)
    dE = dA + de[:, None, :] / E.shape[1]
    dx_proj = model.act_proj.backward(c_proj, dE)
    dh += dx_proj[:, :, cfg.action_dim + cfg.state_dim:].sum(axis=1)

    dx_trunk = model.trunk.backward(c_trunk, dh)
    ty = cfg.target_dim
    model.obs_enc.backward(c_enc, dx_trunk[:, :ty])
    np.add.at(model.grads_extra["instr_emb"], b.instr, dx_trunk[:, ty:ty + cfg.instr_dim])
    if cfg.use_belief:
        dz = dx_trunk[:, ty + cfg.instr_dim:].reshape(N, cfg.n_tokens, cfg.d)
        # stop-gradient: only rows fed by z_init pass gradient on
        model.tokenizer.grads["z_init"] += dz[b.first].sum(axis=0)
    return result
