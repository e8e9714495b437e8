"""Exact and Monte Carlo checks of the identification-posterior theory on finite supports.

Everything here works with categorical distributions, so every oracle is an
exact finite sum and the likelihood ratio is bounded by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import softmax
from .reweighting import WeightConfig


def _as_prob(p, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"{name} must be a non-empty vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} must be a probability vector")
    return p


@dataclass(frozen=True)
class CategoricalPair:
    """Matched (p_plus) and background (p_minus) distributions over one finite outcome set."""

    p_plus: np.ndarray
    p_minus: np.ndarray

    def __post_init__(self):
        pp = _as_prob(self.p_plus, "p_plus")
        pm = _as_prob(self.p_minus, "p_minus")
        if pp.shape != pm.shape:
            raise ValueError("p_plus and p_minus must share the outcome set")
        if pp.size > 64:
            raise ValueError("outcome set limited to 64 categories")
        object.__setattr__(self, "p_plus", pp)
        object.__setattr__(self, "p_minus", pm)

    @property
    def supports_match(self) -> bool:
        return bool(np.array_equal(self.p_plus > 0, self.p_minus > 0))

    @property
    def ratio(self) -> np.ndarray:
        if not self.supports_match:
            raise ValueError("ratio undefined: supports differ")
        r = np.ones_like(self.p_plus)
        on = self.p_minus > 0
        r[on] = self.p_plus[on] / self.p_minus[on]
        return r

    @property
    def ratio_bounds(self) -> tuple[float, float]:
        r = self.ratio[self.p_minus > 0]
        return float(r.min()), float(r.max())


def random_pair(n_outcomes: int, rng: np.random.Generator, c_min: float = 0.1, c_max: float = 10.0,
                max_tries: int = 10_000) -> CategoricalPair:
    """Draw normalized positive vectors until the ratio stays in [c_min, c_max]."""
    if not 1 <= n_outcomes <= 64:
        raise ValueError("n_outcomes must lie in [1, 64]")
    for _ in range(max_tries):
        pp = rng.gamma(1.0, size=n_outcomes) + 1e-3
        pm = rng.gamma(1.0, size=n_outcomes) + 1e-3
        pair = CategoricalPair(pp / pp.sum(), pm / pm.sum())
        lo, hi = pair.ratio_bounds
        if lo >= c_min and hi <= c_max:
            return pair
    raise RuntimeError("rejection sampling did not find a bounded pair")


def bayes_posterior(ratios) -> np.ndarray:
    """P(candidate j is the matched one) = r_j / sum_m r_m."""
    r = np.asarray(ratios, dtype=np.float64)
    if np.any(r <= 0):
        raise ValueError("ratios must be positive")
    return r / r.sum()


def softmax_posterior(ratios, offset: float = 0.0) -> np.ndarray:
    """Softmax over log-ratio logits shifted by a candidate-independent constant."""
    return softmax(np.log(np.asarray(ratios, dtype=np.float64)) + offset)


def kl_closed_form(pair: CategoricalPair) -> float:
    if not pair.supports_match:
        raise ValueError("KL requires coinciding supports")
    on = pair.p_plus > 0
    pp, pm = pair.p_plus[on], pair.p_minus[on]
    return float(np.sum(pp * np.log(pp / pm)))


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def entropy_lens(p_plus) -> float:
    """ln|outcomes| - H(p_plus), which equals KL(p_plus || uniform)."""
    p = _as_prob(p_plus, "p_plus")
    return float(np.log(p.size) - entropy(p))


@dataclass
class ScoreEstimate:
    estimate: float
    std_error: float
    max_abs_score: float
    bound: float
    draws: np.ndarray = field(repr=False)


def stratified_draws(p: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """n categorical draws with floor(n p) fixed per category and the rest random."""
    base = np.floor(n * p).astype(np.int64)
    rest = n - int(base.sum())
    if rest:
        base += rng.multinomial(rest, (n * p - base) / (n * p - base).sum())
    return rng.permutation(np.repeat(np.arange(p.size), base))


def mc_expected_score(pair: CategoricalPair, K: int, draws: int, rng: np.random.Generator,
                      chunk: int = 50_000, stratify: bool = True) -> ScoreEstimate:
    """Monte Carlo mean of log r(Y0) - log(mean of r over Y0..YK).

    Y0 comes from p_plus and the K distractors from p_minus. Only the
    category counts of the distractors enter the sum of ratios, so they are
    drawn as one multinomial per draw. ``stratify`` allocates the Y0 draws
    proportionally to p_plus, which removes most of the matched-term noise.
    """
    if K < 1 or draws < 1:
        raise ValueError("K and draws must be positive")
    r = pair.ratio
    log_r = np.log(r)
    if stratify:
        y0_all = stratified_draws(pair.p_plus, draws, rng)
    else:
        y0_all = rng.choice(r.size, size=draws, p=pair.p_plus)
    out = np.empty(draws)
    done = 0
    while done < draws:
        n = min(chunk, draws - done)
        y0 = y0_all[done:done + n]
        counts = rng.multinomial(K, pair.p_minus, size=n)
        denom = (r[y0] + counts @ r) / (K + 1)
        out[done:done + n] = log_r[y0] - np.log(denom)
        done += n
    lo, hi = pair.ratio_bounds
    se = float(out.std(ddof=1) / np.sqrt(draws)) if draws > 1 else float("nan")
    return ScoreEstimate(float(out.mean()), se, float(np.abs(out).max()), float(np.log(hi / lo)), out)


@dataclass(frozen=True)
class TiltedMixture:
    """Sources with priors and finite-support score distributions, tilted by exp(J / beta)."""

    priors: np.ndarray
    values: tuple
    probs: tuple
    beta: float = 1.5

    def __post_init__(self):
        pri = _as_prob(self.priors, "priors")
        if len(self.values) != pri.size or len(self.probs) != pri.size:
            raise ValueError("one score distribution per source")
        vals = tuple(np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in self.values)
        prs = tuple(_as_prob(np.atleast_1d(p), "score probabilities") for p in self.probs)
        for v, p in zip(vals, prs):
            if v.shape != p.shape:
                raise ValueError("score values and probabilities must align")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        object.__setattr__(self, "priors", pri)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "probs", prs)

    @classmethod
    def constant(cls, priors, scores, beta: float = 1.5) -> "TiltedMixture":
        return cls(np.asarray(priors, dtype=np.float64), tuple([s] for s in scores),
                   tuple([1.0] for _ in scores), beta)

    def mgf(self) -> np.ndarray:
        """E_m[exp(J / beta)] per source, by exact summation."""
        return np.array([np.sum(p * np.exp(v / self.beta)) for v, p in zip(self.values, self.probs)])


def mixture_tilt_closed_form(m: TiltedMixture) -> np.ndarray:
    """Source marginal of the tilted joint: prior times MGF, normalized."""
    logs = np.log(m.priors) + np.log(m.mgf())
    return softmax(logs)


def _sample_mixture(m: TiltedMixture, samples: int, rng: np.random.Generator):
    src = rng.choice(m.priors.size, size=samples, p=m.priors)
    J = np.empty(samples)
    for k, (v, p) in enumerate(zip(m.values, m.probs)):
        at = np.flatnonzero(src == k)
        J[at] = v[rng.choice(v.size, size=at.size, p=p)]
    return src, J


def mc_mixture_proportions(m: TiltedMixture, samples: int, rng: np.random.Generator,
                           clip: WeightConfig | None = None) -> np.ndarray:
    """Self-normalized source shares under exp(J / beta) weights.

    With ``clip`` the weights go through the conservative map of
    :class:`WeightConfig` (clipping plus mixing with one) instead.
    """
    if samples < 1:
        raise ValueError("samples must be positive")
    src, J = _sample_mixture(m, samples, rng)
    if clip is None:
        w = np.exp((J - J.max()) / m.beta)
    else:
        w = 1.0 + clip.alpha * (np.clip(np.exp(J / m.beta), clip.w_min, clip.w_max) - 1.0)
    share = np.bincount(src, weights=w, minlength=m.priors.size)
    return share / share.sum()


def random_mixture(n_sources: int, rng: np.random.Generator, support: int = 4, beta: float = 1.5,
                   score_scale: float = 1.0) -> TiltedMixture:
    priors = rng.dirichlet(np.ones(n_sources))
    values = tuple(rng.normal(0.0, score_scale, size=support) for _ in range(n_sources))
    probs = tuple(rng.dirichlet(np.ones(support)) for _ in range(n_sources))
    return TiltedMixture(priors, values, probs, beta)


def mc_mixture_std_error(m: TiltedMixture, samples: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Self-normalized shares plus delta-method standard errors."""
    src, J = _sample_mixture(m, samples, rng)
    w = np.exp((J - J.max()) / m.beta)
    wbar = w.mean()
    est = np.empty(m.priors.size)
    se = np.empty(m.priors.size)
    for k in range(m.priors.size):
        num = w * (src == k)
        q = num.mean() / wbar
        resid = (num - q * w) / wbar
        est[k] = q
        se[k] = resid.std(ddof=1) / np.sqrt(samples)
    return est, se
