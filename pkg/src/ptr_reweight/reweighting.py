"""Score-to-weight map, self-normalized action loss and shift bounds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class WeightConfig:
    alpha: float = 1.0
    beta: float = 1.5
    w_min: float = 0.25
    w_max: float = 4.0
    gamma: float = 1.0
    discount_weights: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if not self.w_min <= 1.0 <= self.w_max:
            raise ValueError("need w_min <= 1 <= w_max")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")

    @property
    def effective_bounds(self) -> tuple[float, float]:
        return 1.0 + self.alpha * (self.w_min - 1.0), 1.0 + self.alpha * (self.w_max - 1.0)


@dataclass
class WeightBundle:
    raw: float
    clipped: float
    mixed: float
    normalized: float = float("nan")


def weight(T: float, cfg: WeightConfig, valid: bool = True, beta: float | None = None) -> WeightBundle:
    """w = 1 + alpha * (clip(exp(T / beta), w_min, w_max) - 1); invalid samples get 1."""
    if not valid:
        return WeightBundle(1.0, 1.0, 1.0)
    beta = cfg.beta if beta is None else beta
    raw = float(np.exp(T / beta))
    clipped = float(min(max(raw, cfg.w_min), cfg.w_max))
    return WeightBundle(raw, clipped, 1.0 + cfg.alpha * (clipped - 1.0))


def weights(T: np.ndarray, valid: np.ndarray, cfg: WeightConfig, beta: float | None = None):
    """Vectorized :func:`weight`; returns (raw, clipped, mixed, normalized)."""
    beta = cfg.beta if beta is None else beta
    T = np.asarray(T, dtype=np.float64)
    raw = np.where(valid, np.exp(np.where(valid, T, 0.0) / beta), 1.0)
    clipped = np.clip(raw, cfg.w_min, cfg.w_max)
    mixed = np.where(valid, 1.0 + cfg.alpha * (clipped - 1.0), 1.0)
    return raw, clipped, mixed, mixed / np.sum(mixed)


def offset_multiplier(delta_norm, cfg: WeightConfig):
    """gamma ** delta' (delta' is the offset divided by the dataset maximum)."""
    return np.power(cfg.gamma, np.asarray(delta_norm, dtype=np.float64))


def apply_offset_discount(T: float, delta_norm: float, cfg: WeightConfig, mixed: float | None = None):
    """Return (identification-loss multiplier, possibly discounted mixed weight).

    With ``discount_weights`` the weight is pulled toward one:
    ``1 + gamma**delta' * (w - 1)``. ``T`` itself is left unchanged.
    """
    mult = float(offset_multiplier(delta_norm, cfg))
    if mixed is None:
        mixed = weight(T, cfg).mixed
    if cfg.discount_weights:
        mixed = 1.0 + mult * (mixed - 1.0)
    return mult, mixed


def self_normalized_loss(weights_, losses) -> float:
    """sum w l / sum w, with w treated as constants."""
    w = np.asarray(weights_, dtype=np.float64)
    l = np.asarray(losses, dtype=np.float64)
    if w.size == 0:
        raise ValueError("empty batch")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    return float(np.sum(w * l) / np.sum(w))


def self_normalized_grad_coeffs(weights_) -> np.ndarray:
    """d(loss)/d(l_t) = w_t / sum w: the per-sample gradient scale."""
    w = np.asarray(weights_, dtype=np.float64)
    return w / np.sum(w)


def kl_bound(cfg: WeightConfig) -> float:
    lo, hi = cfg.effective_bounds
    return float(np.log(hi / lo))


def empirical_kl(weights_) -> float:
    """KL(q || uniform) for q proportional to the batch weights."""
    w = np.asarray(weights_, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    q = w / np.sum(w)
    return float(np.sum(q * np.log(q * len(w))))


def source_proportion_bounds(cfg: WeightConfig) -> tuple[float, float]:
    lo, hi = cfg.effective_bounds
    return lo / hi, hi / lo
