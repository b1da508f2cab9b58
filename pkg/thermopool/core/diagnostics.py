"""Convergence diagnostics, PSIS-LOO model comparison and predictive checks."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import fft, stats
from scipy.special import logsumexp

from .config import PARETO_K_THRESHOLD
from .errors import AllRatiosDegenerate, MismatchedObservations, ValidationError, ZeroVariance
from .inference import ModelSpec, constrained_slices, linear_predictor, pointwise_loglik, sample_prior
from .panel import DesignMatrix
from .sampler import PosteriorDraws

logger = logging.getLogger(__name__)

DrawSource = Union[np.ndarray, PosteriorDraws]


def _chains(draws: DrawSource, parameter: Optional[str] = None) -> np.ndarray:
    """(chain, iteration) array for one parameter."""
    if isinstance(draws, PosteriorDraws):
        if parameter is None:
            raise ValueError("a parameter label is required for PosteriorDraws input")
        ary = draws.column(parameter)
    else:
        ary = np.asarray(draws, dtype=float)
    ary = np.atleast_2d(ary)
    if ary.ndim != 2:
        raise ValueError(f"expected a (chain, iteration) array, got shape {ary.shape}")
    if ary.shape[1] < 4:
        raise ValidationError(f"need at least 4 draws per chain, got {ary.shape[1]}")
    if np.ptp(ary) == 0:
        raise ZeroVariance("all draws are identical")
    return ary


def _split_chains(ary: np.ndarray) -> np.ndarray:
    half = ary.shape[1] // 2
    return np.vstack((ary[:, :half], ary[:, -half:]))


def _z_scale(ary: np.ndarray) -> np.ndarray:
    ranks = stats.rankdata(ary, method="average").reshape(ary.shape)
    return stats.norm.ppf((ranks - 3.0 / 8.0) / (ary.size + 0.25))


def _rhat_basic(ary: np.ndarray) -> float:
    n = ary.shape[1]
    between = n * np.var(ary.mean(axis=1), ddof=1)
    within = np.mean(np.var(ary, axis=1, ddof=1))
    return float(np.sqrt((between / within + n - 1) / n))


def split_rhat(draws: DrawSource, parameter: Optional[str] = None) -> float:
    """Largest of the rank-normalized bulk, folded-tail and classic split R-hat."""
    split = _split_chains(_chains(draws, parameter))
    bulk = _rhat_basic(_z_scale(split))
    tail = _rhat_basic(_z_scale(np.abs(split - np.median(split))))
    classic = _rhat_basic(split)
    return max(bulk, tail, classic)


def _autocov(ary: np.ndarray) -> np.ndarray:
    """Biased autocovariance per chain (row) by FFT."""
    n = ary.shape[1]
    centered = ary - ary.mean(axis=1, keepdims=True)
    size = fft.next_fast_len(2 * n)
    spectrum = fft.rfft(centered, n=size, axis=1)
    acov = fft.irfft(spectrum * np.conjugate(spectrum), n=size, axis=1)[:, :n]
    return acov / n


def _ess(ary: np.ndarray) -> float:
    """Effective sample size with Geyer's initial monotone sequence."""
    ary = np.asarray(ary, dtype=float)
    if np.ptp(ary) < np.finfo(float).resolution:
        return float(ary.size)
    n_chain, n_draw = ary.shape
    acov = _autocov(ary)
    chain_mean = ary.mean(axis=1)
    mean_var = np.mean(acov[:, 0]) * n_draw / (n_draw - 1.0)
    var_plus = mean_var * (n_draw - 1.0) / n_draw
    if n_chain > 1:
        var_plus += np.var(chain_mean, ddof=1)

    rho = np.zeros(n_draw)
    rho_even = 1.0
    rho[0] = rho_even
    rho_odd = 1.0 - (mean_var - np.mean(acov[:, 1])) / var_plus
    rho[1] = rho_odd
    t = 1
    while t < n_draw - 3 and rho_even + rho_odd > 0.0:
        rho_even = 1.0 - (mean_var - np.mean(acov[:, t + 1])) / var_plus
        rho_odd = 1.0 - (mean_var - np.mean(acov[:, t + 2])) / var_plus
        if rho_even + rho_odd >= 0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_even > 0:
        rho[max_t + 1] = rho_even
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2
    total = n_chain * n_draw
    tau = -1.0 + 2.0 * np.sum(rho[: max_t + 1]) + np.sum(rho[max_t + 1: max_t + 2])
    tau = max(tau, 1.0 / np.log10(total))
    return float(total / tau)


def ess_bulk(draws: DrawSource, parameter: Optional[str] = None) -> float:
    return _ess(_z_scale(_split_chains(_chains(draws, parameter))))


def ess_tail(draws: DrawSource, parameter: Optional[str] = None, probs: Tuple[float, float] = (0.05, 0.95)) -> float:
    """Minimum ESS of the 5% and 95% quantile indicators."""
    split = _split_chains(_chains(draws, parameter))
    out = []
    for prob in probs:
        indicator = (split <= np.quantile(split, prob)).astype(float)
        out.append(_ess(indicator))
    return float(min(out))


def convergence_table(draws: PosteriorDraws) -> pd.DataFrame:
    """R-hat, bulk ESS and tail ESS per parameter; constant parameters get NaN."""
    rows = []
    for label in draws.column_labels:
        try:
            row = (split_rhat(draws, label), ess_bulk(draws, label), ess_tail(draws, label))
        except ZeroVariance:
            row = (math.nan, math.nan, math.nan)
        rows.append((label, *row))
    return pd.DataFrame(rows, columns=["parameter", "rhat", "ess_bulk", "ess_tail"])


# -------------------- PSIS-LOO --------------------
def gpd_fit(x: np.ndarray) -> Tuple[float, float]:
    """Empirical Bayes estimate of generalized Pareto (k, sigma) for sorted exceedances."""
    n = len(x)
    prior = 3
    m = 30 + int(math.sqrt(n))
    i = np.arange(1, m + 1, dtype=float)
    bs = 1.0 - np.sqrt(m / (i - 0.5))
    bs = bs / (prior * x[int(n / 4 + 0.5) - 1]) + 1.0 / x[-1]
    ks = np.mean(np.log1p(-bs[:, None] * x), axis=1)
    L = n * (np.log(-bs / ks) - ks - 1.0)
    w = 1.0 / np.sum(np.exp(L - L[:, None]), axis=1)
    keep = w >= 10 * np.finfo(float).eps
    bs, w = bs[keep], w[keep] / np.sum(w[keep])
    b = np.sum(bs * w)
    k = np.mean(np.log1p(-b * x))
    sigma = -k / b
    a = 10.0
    k = k * n / (n + a) + a * 0.5 / (n + a)
    return float(k), float(sigma)


def gpd_quantile(p: np.ndarray, k: float, sigma: float) -> np.ndarray:
    if abs(k) < np.finfo(float).eps:
        return -sigma * np.log1p(-p)
    return sigma * np.expm1(-k * np.log1p(-p)) / k


def psis_smooth(log_ratios: np.ndarray, r_eff: float = 1.0) -> Tuple[np.ndarray, float]:
    """Pareto-smooth one vector of log importance ratios; returns normalized log weights and k."""
    x = np.asarray(log_ratios, dtype=float)
    S = x.size
    if not np.any(np.isfinite(x)):
        raise AllRatiosDegenerate("every importance ratio is non-finite")
    x = x - np.max(x)
    if np.ptp(x[np.isfinite(x)]) == 0:
        return x - logsumexp(x), 0.0
    tail_len = int(math.ceil(min(0.2 * S, 3.0 * math.sqrt(S / r_eff))))
    order = np.argsort(x, kind="mergesort")
    cutoff = max(x[order[-tail_len - 1]], math.log(np.finfo(float).tiny))
    tail = np.flatnonzero(x > cutoff)
    k = math.inf
    if tail.size > 4:
        tail_sorted = tail[np.argsort(x[tail], kind="mergesort")]
        exceed = np.exp(x[tail_sorted]) - math.exp(cutoff)
        k, sigma = gpd_fit(exceed)
        if math.isfinite(k):
            probs = (np.arange(tail.size) + 0.5) / tail.size
            smoothed = np.log(gpd_quantile(probs, k, sigma) + math.exp(cutoff))
            x[tail_sorted] = np.minimum(smoothed, 0.0)
    return x - logsumexp(x), k


def relative_efficiency(log_lik: np.ndarray) -> np.ndarray:
    """r_eff per observation from chain-structured log likelihoods (C, S, n)."""
    C, S, n = log_lik.shape
    out = np.ones(n)
    if S < 4:
        return out
    for i in range(n):
        lik = np.exp(log_lik[:, :, i] - np.max(log_lik[:, :, i]))
        out[i] = min(1.0, _ess(lik) / (C * S)) if np.ptp(lik) > 0 else 1.0
    return out


@dataclass
class LooResult:
    elpd: float
    se: float
    pointwise: np.ndarray
    pareto_k: np.ndarray
    p_loo: float = 0.0
    name: str = "model"
    variant: str = ""
    observations: Tuple = field(default_factory=tuple)

    @property
    def flagged(self) -> np.ndarray:
        return np.flatnonzero(self.pareto_k > PARETO_K_THRESHOLD)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"elpd_loo": self.pointwise, "pareto_k": self.pareto_k})
        if self.observations:
            frame.insert(0, "country", [o[0] for o in self.observations])
            frame.insert(1, "year", [o[1] for o in self.observations])
        return frame


def psis_loo_from_loglik(
    log_lik: np.ndarray,
    r_eff: Optional[np.ndarray] = None,
    name: str = "model",
    variant: str = "",
    observations: Sequence = (),
) -> LooResult:
    """PSIS-LOO from log likelihoods shaped (S, n) or (C, S, n)."""
    log_lik = np.asarray(log_lik, dtype=float)
    if log_lik.ndim == 3:
        if r_eff is None:
            r_eff = relative_efficiency(log_lik)
        log_lik = log_lik.reshape(-1, log_lik.shape[2])
    if log_lik.ndim != 2:
        raise ValueError(f"log likelihood must be (S, n) or (C, S, n), got {log_lik.shape}")
    S, n = log_lik.shape
    r_eff = np.ones(n) if r_eff is None else np.asarray(r_eff, dtype=float)

    pointwise = np.empty(n)
    ks = np.empty(n)
    for i in range(n):
        lw, k = psis_smooth(-log_lik[:, i], float(r_eff[i]))
        pointwise[i] = logsumexp(lw + log_lik[:, i])
        ks[i] = k
    lpd = logsumexp(log_lik, axis=0) - math.log(S)
    elpd = math.fsum(pointwise)
    se = math.sqrt(n * np.var(pointwise, ddof=1)) if n > 1 else 0.0
    result = LooResult(
        elpd=elpd, se=se, pointwise=pointwise, pareto_k=ks,
        p_loo=math.fsum(lpd) - elpd, name=name, variant=variant, observations=tuple(observations),
    )
    if result.flagged.size:
        logger.warning("%s: %d observations with Pareto k > %.1f", name, result.flagged.size, PARETO_K_THRESHOLD)
    return result


def psis_loo(draws: PosteriorDraws, design: DesignMatrix, spec: ModelSpec, name: Optional[str] = None) -> LooResult:
    """PSIS-LOO for a fitted model on its design."""
    C, S, _ = draws.draws.shape
    log_lik = pointwise_loglik(draws.matrix(), design, spec).reshape(C, S, design.n)
    observations = tuple(zip((design.countries[g] for g in design.group), design.years.tolist()))
    return psis_loo_from_loglik(
        log_lik, name=name or spec.variant.value, variant=spec.variant.value, observations=observations,
    )


def compare_models(results: Sequence[LooResult]) -> pd.DataFrame:
    """Rank models by ELPD; differences and paired standard errors against the best."""
    if not results:
        raise ValidationError("no models to compare")
    n = results[0].pointwise.size
    for r in results:
        if r.pointwise.size != n or (r.observations and results[0].observations
                                     and r.observations != results[0].observations):
            raise MismatchedObservations(f"{r.name} was scored on different observations")
    ordered = sorted(results, key=lambda r: (-r.elpd, r.name))
    best = ordered[0]
    rows = []
    for r in ordered:
        diff = r.pointwise - best.pointwise
        se_diff = math.sqrt(n * np.var(diff, ddof=1)) if n > 1 else 0.0
        rows.append({
            "model": r.name,
            "variant": r.variant,
            "elpd_loo": r.elpd,
            "elpd_diff": math.fsum(diff),
            "se_diff": se_diff,
            "se": r.se,
            "p_loo": r.p_loo,
            "n_high_k": int(r.flagged.size),
        })
    return pd.DataFrame(rows)


# -------------------- predictive checks --------------------
@dataclass
class PredictiveResult:
    mode: str
    replicates: np.ndarray  # (n_reps, n)
    observed: np.ndarray
    lower: np.ndarray
    median: np.ndarray
    upper: np.ndarray
    ks_statistic: float
    ks_pvalue: float

    @property
    def coverage(self) -> float:
        inside = (self.observed >= self.lower) & (self.observed <= self.upper)
        return float(np.mean(inside))

    @property
    def range_covered(self) -> bool:
        return bool(self.replicates.min() <= self.observed.min() and self.replicates.max() >= self.observed.max())

    def to_frame(self, design: Optional[DesignMatrix] = None) -> pd.DataFrame:
        frame = pd.DataFrame({
            "observed": self.observed, "lower": self.lower, "median": self.median, "upper": self.upper,
        })
        if design is not None:
            frame.insert(0, "country", [design.countries[g] for g in design.group])
            frame.insert(1, "year", design.years)
        return frame

    def summary(self) -> pd.DataFrame:
        return pd.DataFrame([{
            "mode": self.mode,
            "n_reps": self.replicates.shape[0],
            "coverage": self.coverage,
            "ks_statistic": self.ks_statistic,
            "ks_pvalue": self.ks_pvalue,
            "replicated_min": float(self.replicates.min()),
            "replicated_max": float(self.replicates.max()),
            "observed_min": float(self.observed.min()),
            "observed_max": float(self.observed.max()),
        }])


def predictive_simulate(
    design: DesignMatrix,
    spec: ModelSpec,
    mode: str = "posterior",
    n_reps: int = 100,
    draws: Optional[PosteriorDraws] = None,
    seed: int = 0,
    band: float = 0.95,
) -> PredictiveResult:
    """Replicate the response from prior or posterior draws and summarize against observations."""
    rng = np.random.default_rng(seed)
    if mode == "posterior":
        if draws is None:
            raise ValidationError("posterior predictive simulation needs draws")
        pool = draws.matrix()
        idx = rng.choice(pool.shape[0], size=n_reps, replace=n_reps > pool.shape[0])
        params = pool[idx]
    elif mode == "prior":
        params = sample_prior(spec, n_reps, rng)
    else:
        raise ValidationError(f"unknown predictive mode {mode!r}")
    sigma = params[:, constrained_slices(spec)["sigma_e"]]
    mu = linear_predictor(params, design, spec)
    replicates = mu + sigma * rng.standard_normal(mu.shape)
    tail = (1.0 - band) / 2.0
    lower, median, upper = np.quantile(replicates, [tail, 0.5, 1.0 - tail], axis=0)
    ks = stats.ks_2samp(design.y, replicates.reshape(-1))
    logger.info("%s predictive check: %d replicates, KS=%.3f", mode, n_reps, ks.statistic)
    return PredictiveResult(mode, replicates, design.y.copy(), lower, median, upper,
                            float(ks.statistic), float(ks.pvalue))
