"""Belief proxy tokens: soft causal assignment of L per-step features to M slots.

Shapes follow ``(..., L, d)`` for per-step features and ``(..., L, M)`` for
assignments, so every op works on a single chunk or on a batch of chunks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import DTYPE, NumericsError, xavier_uniform


@dataclass
class TokenizerParams:
    W_f: np.ndarray  # (d, 2d)
    W_a: np.ndarray  # (M, d)
    z_init: np.ndarray  # (M, d)
    tau_tok: float = 1.0
    lambda_ent: float = 1e-3
    lambda_div: float = 1e-3
    grads: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.tau_tok <= 0:
            raise NumericsError("tau_tok must be positive")
        if not self.grads:
            self.grads = {k: np.zeros_like(v) for k, v in self.named().items()}

    @classmethod
    def init(cls, d: int, M: int, rng: np.random.Generator, **kw) -> "TokenizerParams":
        return cls(
            W_f=xavier_uniform(d, 2 * d, rng),
            W_a=xavier_uniform(M, d, rng),
            z_init=rng.normal(0.0, 0.1, size=(M, d)),
            **kw,
        )

    @property
    def d(self) -> int:
        return self.W_f.shape[0]

    @property
    def M(self) -> int:
        return self.W_a.shape[0]

    def named(self) -> dict[str, np.ndarray]:
        return {"W_f": self.W_f, "W_a": self.W_a, "z_init": self.z_init}

    def params(self) -> list[np.ndarray]:
        return list(self.named().values())

    def grad_list(self) -> list[np.ndarray]:
        return [self.grads[k] for k in self.named()]

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)


@dataclass
class BeliefTokens:
    tokens: np.ndarray  # (..., M, d)
    stop_grad: bool = True


def fuse(C: np.ndarray, A: np.ndarray, params: TokenizerParams) -> np.ndarray:
    """c_i = tanh(W_f [C_i; A_i]) row by row."""
    C = np.asarray(C, dtype=DTYPE)
    A = np.asarray(A, dtype=DTYPE)
    if C.shape != A.shape or C.shape[-1] != params.d:
        raise NumericsError(f"fuse shape mismatch {C.shape} vs {A.shape} (d={params.d})")
    return np.tanh(np.concatenate([C, A], axis=-1) @ params.W_f.T)


def assign(c: np.ndarray, params: TokenizerParams) -> np.ndarray:
    """Assignment matrix (..., L, M): softmax over time of (W_a c_i)_m / tau_tok."""
    xi = (c @ params.W_a.T) / params.tau_tok
    xi = xi - np.max(xi, axis=-2, keepdims=True)
    e = np.exp(xi)
    return e / np.sum(e, axis=-2, keepdims=True)


def merge(pi: np.ndarray, c: np.ndarray) -> BeliefTokens:
    """z_m = sum_i pi_{i,m} c_i."""
    return BeliefTokens(np.swapaxes(pi, -1, -2) @ c, stop_grad=False)


def reconstruct(pi: np.ndarray, z: BeliefTokens | np.ndarray) -> np.ndarray:
    """c~_i = sum_m pi_{i,m} z_m."""
    tokens = z.tokens if isinstance(z, BeliefTokens) else z
    return pi @ tokens


def entropy_reg(pi: np.ndarray) -> np.ndarray:
    """Mean over slots of each slot's entropy over time (0 log 0 = 0)."""
    M = pi.shape[-1]
    plogp = np.where(pi > 0, pi * np.log(np.where(pi > 0, pi, 1.0)), 0.0)
    return -np.sum(plogp, axis=(-2, -1)) / M


def diversity_reg(pi: np.ndarray) -> np.ndarray:
    """||Pi^T Pi - I||_F^2."""
    M = pi.shape[-1]
    G = np.swapaxes(pi, -1, -2) @ pi
    return np.sum((G - np.eye(M)) ** 2, axis=(-2, -1))


@dataclass
class TokenizerCache:
    C: np.ndarray
    A: np.ndarray
    c: np.ndarray
    pi: np.ndarray


def tokenizer_forward(C: np.ndarray, A: np.ndarray, params: TokenizerParams):
    """Fuse, assign and merge; returns (z_next, per-chunk L_tok, cache).

    ``z_next`` is detached: it is a fresh array flagged ``stop_grad`` and no
    backward path into the previous chunk exists.
    """
    c = fuse(C, A, params)
    pi = assign(c, params)
    z = merge(pi, c)
    l_tok = params.lambda_ent * entropy_reg(pi) + params.lambda_div * diversity_reg(pi)
    return BeliefTokens(z.tokens.copy(), stop_grad=True), l_tok, TokenizerCache(C, A, c, pi)


def tokenizer_backward(cache: TokenizerCache, params: TokenizerParams, dl_tok: np.ndarray | float):
    """Backprop ``dl_tok`` (per chunk) through L_tok.

    Accumulates into ``params.grads`` and returns gradients w.r.t. C and A.
    """
    pi, c = cache.pi, cache.c
    L, M = pi.shape[-2], pi.shape[-1]
    g = np.asarray(dl_tok, dtype=DTYPE)[..., None, None]
    safe = np.where(pi > 0, pi, 1.0)
    d_pi = g * params.lambda_ent * (-(np.log(safe) + 1.0) / M)
    G = np.swapaxes(pi, -1, -2) @ pi
    d_pi = d_pi + g * params.lambda_div * 4.0 * (pi @ (G - np.eye(M)))
    # softmax over the time axis, per slot
    d_xi = pi * (d_pi - np.sum(pi * d_pi, axis=-2, keepdims=True)) / params.tau_tok
    params.grads["W_a"] += d_xi.reshape(-1, M).T @ c.reshape(-1, c.shape[-1])
    d_c = d_xi @ params.W_a
    d_pre = d_c * (1.0 - c ** 2)
    X = np.concatenate([cache.C, cache.A], axis=-1)
    params.grads["W_f"] += d_pre.reshape(-1, d_pre.shape[-1]).T @ X.reshape(-1, X.shape[-1])
    d_X = d_pre @ params.W_f
    d = params.d
    return d_X[..., :d], d_X[..., d:]


def step(H: np.ndarray, E: np.ndarray, params: TokenizerParams, prev: BeliefTokens | None = None):
    """One recursion step; returns (z_next with stop_grad, L_tok).

    ``prev`` is accepted for symmetry with the chunk recursion: the next
    tokens depend only on the current-step features, never on the previous
    tokens' gradient path. See :func:`initial_tokens` for the first chunk.
    """
    z_next, l_tok, _ = tokenizer_forward(H, E, params)
    return z_next, l_tok


def initial_tokens(params: TokenizerParams, batch: int | None = None) -> BeliefTokens:
    """Learned z_init, broadcast over a batch; gradient flows into ``z_init``."""
    z = params.z_init if batch is None else np.broadcast_to(params.z_init, (batch,) + params.z_init.shape).copy()
    return BeliefTokens(z, stop_grad=False)
