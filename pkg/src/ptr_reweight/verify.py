"""Monte Carlo and closed-form checks bundled into one JSON-serializable report."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .numerics import make_rng
from .reweighting import WeightConfig, empirical_kl, kl_bound, source_proportion_bounds, weights
from .theory import (CategoricalPair, TiltedMixture, bayes_posterior, kl_closed_form, mc_expected_score,
                     mc_mixture_proportions, mixture_tilt_closed_form, random_pair, softmax_posterior)


@dataclass
class VerifyConfig:
    seed: int = 0
    tolerance_scale: float = 1.0
    n_pairs: int = 100
    score_draws: int = 200_000
    trend_seeds: int = 10
    mixture_samples: int = 100_000
    n_kl_batches: int = 10_000

    def __post_init__(self):
        if self.tolerance_scale <= 0:
            raise ValueError("tolerance_scale must be positive")


def _check(name: str, ok: bool, **info) -> dict:
    return {"name": name, "pass": bool(ok), **info}


def check_posterior_consistency(cfg: VerifyConfig) -> dict:
    rng = make_rng(cfg.seed, 1)
    tol = 1e-12 * cfg.tolerance_scale
    worst = 0.0
    for _ in range(cfg.n_pairs):
        pair = random_pair(int(rng.integers(2, 9)), rng)
        n_cand = int(rng.integers(2, 9))
        r = pair.ratio[rng.integers(0, pair.ratio.size, size=n_cand)]
        ref = bayes_posterior(r)
        for b in (0.0, float(rng.normal(0, 10))):
            worst = max(worst, float(np.abs(softmax_posterior(r, b) - ref).max()))
        worst = max(worst, float(np.abs(bayes_posterior(r * rng.uniform(0.1, 10)) - ref).max()))
    return _check("posterior_consistency", worst <= tol, max_abs_error=worst, tolerance=tol)


def check_kl_convergence(cfg: VerifyConfig) -> dict:
    pair = CategoricalPair(np.array([0.7, 0.2, 0.1]), np.full(3, 1 / 3))
    kl = kl_closed_form(pair)
    tol = 0.02 * cfg.tolerance_scale
    est = mc_expected_score(pair, 4096, cfg.score_draws, make_rng(cfg.seed, 2))
    trend = []
    for K in (8, 64, 512, 4096):
        errs = [abs(mc_expected_score(pair, K, cfg.score_draws, make_rng(cfg.seed + s, 3)).estimate - kl)
                for s in range(cfg.trend_seeds)]
        trend.append(float(np.mean(errs)))
    monotone = all(a >= b for a, b in zip(trend, trend[1:]))
    bounded = est.max_abs_score <= est.bound
    ok = abs(est.estimate - kl) <= tol and monotone and bounded
    return _check("kl_convergence", ok, oracle=kl, estimate=est.estimate, std_error=est.std_error,
                  tolerance=tol, trend_K=[8, 64, 512, 4096], trend_abs_error=trend, monotone=monotone,
                  max_abs_score=est.max_abs_score, score_bound=est.bound)


def check_source_tilt(cfg: VerifyConfig) -> dict:
    beta = 1.5
    m = TiltedMixture.constant([0.5, 0.5], [beta * np.log(2.0), 0.0], beta)
    exact = mixture_tilt_closed_form(m)
    mc = mc_mixture_proportions(m, cfg.mixture_samples, make_rng(cfg.seed, 4))
    tol = 0.01 * cfg.tolerance_scale
    wcfg = WeightConfig()
    lo, hi = source_proportion_bounds(wcfg)
    rng = make_rng(cfg.seed, 5)
    ratios = []
    # Wide score spreads push the clipped map to both ends.
    for _ in range(50):
        mix = TiltedMixture(rng.dirichlet(np.ones(3)), tuple(rng.normal(0, 6, size=4) for _ in range(3)),
                            tuple(rng.dirichlet(np.ones(4)) for _ in range(3)), beta)
        q = mc_mixture_proportions(mix, 2000, rng, clip=wcfg)
        ratios.extend((q / mix.priors).tolist())
    in_bounds = all(lo <= r <= hi for r in ratios)
    ok = float(np.abs(exact - [2 / 3, 1 / 3]).max()) <= 1e-12 and float(np.abs(mc - exact).max()) <= tol and in_bounds
    return _check("source_tilt", ok, closed_form=exact.tolist(), monte_carlo=mc.tolist(), tolerance=tol,
                  clipped_ratio_range=[min(ratios), max(ratios)], ratio_bounds=[lo, hi])


def check_kl_bound(cfg: VerifyConfig) -> dict:
    wcfg = WeightConfig()
    bound = kl_bound(wcfg)
    rng = make_rng(cfg.seed, 6)
    worst = -np.inf
    for _ in range(cfg.n_kl_batches):
        n = int(rng.integers(2, 65))
        T = rng.normal(0, 4, size=n)
        mixed = weights(T, np.ones(n, dtype=bool), wcfg)[2]
        worst = max(worst, empirical_kl(mixed) - bound)
    half = kl_bound(WeightConfig(alpha=0.5))
    ok = (abs(bound - np.log(16)) <= 1e-4 and worst <= 1e-12 * cfg.tolerance_scale
          and abs(half - np.log(4)) <= 1e-12)
    return _check("kl_bound", ok, bound=bound, max_excess=float(worst), half_alpha_bound=half)


CHECKS = (check_posterior_consistency, check_kl_convergence, check_source_tilt, check_kl_bound)


def run_verification(cfg: VerifyConfig = VerifyConfig()) -> dict:
    results = []
    for fn in CHECKS:
        t = time.perf_counter()
        res = fn(cfg)
        res["seconds"] = time.perf_counter() - t
        results.append(res)
    return {"pass": all(r["pass"] for r in results), "checks": results}
