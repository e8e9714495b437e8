"""Dense float64 arithmetic, seeded randomness and a small reverse-mode MLP.

Everything here works on plain ``numpy`` arrays. Feature matrices are
row-major ``float64`` arrays; a leading batch axis is allowed wherever a
single vector is accepted.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
L2_EPS = 1e-6


class NumericsError(ValueError):
    """Raised on non-finite inputs or shape mismatches."""


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator keyed by ``(seed, *stream)``.

    Distinct stream tuples give statistically independent generators (via
    ``SeedSequence`` entropy mixing), so components can draw without
    perturbing each other's sequences.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"{what} contains non-finite values")


def log_sum_exp(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(logits, dtype=DTYPE)
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    x = np.asarray(logits, dtype=DTYPE)
    _check_finite(x, "logits")
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def l2_normalize(v: np.ndarray, eps: float = L2_EPS, axis: int = -1) -> np.ndarray:
    """Scale rows to unit norm; rows with norm below ``eps`` map to zero."""
    x = np.asarray(v, dtype=DTYPE)
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    safe = np.where(n > eps, n, 1.0)
    return np.where(n > eps, x / safe, 0.0)


def xavier_uniform(fan_out: int, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


class Mlp:
    """Fully connected net: tanh on hidden layers, identity on the output.

    Weights are stored ``(out, in)`` so ``y = x @ W.T + b``. Gradients
    accumulate into ``weight_grads``/``bias_grads`` until :meth:`zero_grad`.
    """

    def __init__(self, layer_dims: Sequence[int], rng: np.random.Generator | None = None):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or min(dims) < 1:
            raise NumericsError(f"bad layer dims {dims}")
        self.layer_dims = dims
        if rng is None:
            self.weights = [np.zeros((o, i)) for i, o in zip(dims[:-1], dims[1:])]
        else:
            self.weights = [xavier_uniform(o, i, rng) for i, o in zip(dims[:-1], dims[1:])]
        self.biases = [np.zeros(o) for o in dims[1:]]
        self.weight_grads = [np.zeros_like(w) for w in self.weights]
        self.bias_grads = [np.zeros_like(b) for b in self.biases]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def grads(self) -> list[np.ndarray]:
        return [g for pair in zip(self.weight_grads, self.bias_grads) for g in pair]

    def zero_grad(self) -> None:
        for g in self.grads():
            g.fill(0.0)

    def copy(self) -> "Mlp":
        other = Mlp(self.layer_dims)
        for dst, src in zip(other.params(), self.params()):
            dst[...] = src
        return other

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        return mlp_forward(self, x)

    def backward(self, cache: list[np.ndarray], out_grad: np.ndarray) -> np.ndarray:
        return mlp_backward(self, cache, out_grad)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self, x)[0]


def mlp_forward(m: Mlp, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Return the output and the list of layer inputs needed by backward.

    The cache holds the input to every layer plus the final output, so the
    tanh derivative can be recovered from the stored activations.
    """
    a = np.asarray(x, dtype=DTYPE)
    if a.shape[-1] != m.layer_dims[0]:
        raise NumericsError(f"input dim {a.shape[-1]} != {m.layer_dims[0]}")
    cache = [a]
    for k, (w, b) in enumerate(zip(m.weights, m.biases)):
        a = a @ w.T + b
        if k < m.n_layers - 1:
            a = np.tanh(a)
        cache.append(a)
    return a, cache


def mlp_backward(m: Mlp, cache: list[np.ndarray] | None, out_grad: np.ndarray) -> np.ndarray:
    if not cache or len(cache) != m.n_layers + 1:
        raise NumericsError("backward called without a matching forward cache")
    g = np.asarray(out_grad, dtype=DTYPE)
    for k in reversed(range(m.n_layers)):
        if k < m.n_layers - 1:
            g = g * (1.0 - cache[k + 1] ** 2)
        inp = cache[k]
        g2 = g.reshape(-1, g.shape[-1])
        m.weight_grads[k] += g2.T @ inp.reshape(-1, inp.shape[-1])
        m.bias_grads[k] += g2.sum(axis=0)
        g = g @ m.weights[k]
    return g


def ema_blend(target: Mlp, online: Mlp, mu: float) -> Mlp:
    """In-place ``p_t <- mu * p_t + (1 - mu) * p_o`` over all parameters."""
    if not 0.0 <= mu <= 1.0:
        raise NumericsError(f"mu={mu} outside [0, 1]")
    if target.layer_dims != online.layer_dims:
        raise NumericsError("EMA shape mismatch")
    for pt, po in zip(target.params(), online.params()):
        pt *= mu
        pt += (1.0 - mu) * po
    return target


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.array(x, dtype=DTYPE)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise then max."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def flatten(arrays: Iterable[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)


def assign_flat(arrays: Sequence[np.ndarray], vec: np.ndarray) -> None:
    off = 0
    for a in arrays:
        n = a.size
        a[...] = vec[off:off + n].reshape(a.shape)
        off += n
    if off != vec.size:
        raise NumericsError(f"flat vector has {vec.size} entries, parameters need {off}")


class AdamW:
    """Adam with decoupled weight decay over a fixed list of arrays."""

    def __init__(self, params: Sequence[np.ndarray], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cosine_lr(step: int, base_lr: float, total: int, warmup: int) -> float:
    """Linear warmup then cosine decay to zero."""
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(total - warmup, 1)
    progress = min(max(step - warmup, 0) / span, 1.0)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


def save_snapshot(path: str | Path, named: dict[str, np.ndarray]) -> None:
    """Write ``<path>.bin`` (little-endian float64, concatenated) + ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    layout = []
    chunks = []
    off = 0
    for name, arr in named.items():
        a = np.asarray(arr, dtype="<f8")
        layout.append({"name": name, "shape": list(a.shape), "offset": off})
        chunks.append(a.ravel())
        off += a.size
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    path.with_suffix(".bin").write_bytes(blob.astype("<f8").tobytes())
    path.with_suffix(".json").write_text(json.dumps({"dtype": "float64-le", "count": off, "arrays": layout}, indent=2))


def load_snapshot(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    if blob.size != meta["count"]:
        raise NumericsError("snapshot payload does not match its sidecar")
    out = {}
    for entry in meta["arrays"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        out[entry["name"]] = blob[entry["offset"]:entry["offset"] + n].reshape(entry["shape"]).astype(DTYPE)
    return out
