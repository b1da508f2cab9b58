"""Hierarchical exposure-response model: parameter layout, priors and log posterior.

The group effects are non-centered: with standardized deviates ``Z`` (N x D),
group standard deviations ``tau`` (D) and the Cholesky factor ``L`` of the
group correlation matrix, the country deviations are ``E = (Z @ L.T) * tau``.
Row ``i`` of ``E`` holds (alpha_i, beta_i1, ..., beta_iK).

Unconstrained layout, in order::

    alpha, nu, beta (K_eff), gamma (L), log sigma_e,
    log tau (D), Cholesky CPCs (D(D-1)/2), Z (N*D)

with D = K_eff + 1 for random slopes, 1 for random intercepts and 0 for the
pooled model. The LKJ density on the Cholesky factor is left unnormalized so
that it is exactly 0 at the identity.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy import stats
from scipy.special import gammaln

from .config import LKJ_ETA, STUDENT_T_DF
from .errors import InvalidCholesky
from .panel import DesignMatrix

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
_DRAW_CHUNK = 256


class Variant(str, Enum):
    RandomSlopes = "random_slopes"
    RandomIntercepts = "random_intercepts"
    Pooled = "pooled"

    @classmethod
    def parse(cls, text: str) -> "Variant":
        key = text.strip().lower().replace("-", "_")
        for member in cls:
            if key in (member.value, member.name.lower()):
                return member
        raise ValueError(f"unknown model variant {text!r}")


class PriorPreset(str, Enum):
    Default = "default"
    VShape = "vshape"
    HockeyStick = "hockey"
    TightGroup = "tight"
    Wide = "wide"


class PriorConfig(BaseModel):
    """Prior hyperparameters; presets cover the sensitivity suite."""

    preset: PriorPreset = PriorPreset.Default
    beta_means: Optional[List[float]] = None
    beta_sds: Optional[List[float]] = None
    coef_sd: float = Field(1.0, gt=0)  # alpha, nu, gamma and default beta sd
    group_sd_scale: float = Field(1.0, gt=0)
    sigma_e_df: float = Field(STUDENT_T_DF, gt=0)
    sigma_e_scale: Optional[float] = Field(None, gt=0)
    shape_step: float = Field(0.5, ge=0)

    @classmethod
    def from_preset(cls, preset: str | PriorPreset) -> "PriorConfig":
        preset = PriorPreset(preset)
        if preset is PriorPreset.TightGroup:
            return cls(preset=preset, group_sd_scale=0.01)
        if preset is PriorPreset.Wide:
            return cls(preset=preset, coef_sd=10.0)
        return cls(preset=preset)

    def resolve_beta(
        self, retained_bins: Sequence[int], reference_bins: Sequence[int]
    ) -> Tuple[List[float], List[float]]:
        K_eff = len(retained_bins)
        sds = list(self.beta_sds) if self.beta_sds is not None else [self.coef_sd] * K_eff
        if self.beta_means is not None:
            means = list(self.beta_means)
        elif self.preset in (PriorPreset.VShape, PriorPreset.HockeyStick) and reference_bins:
            lo, hi = min(reference_bins), max(reference_bins)
            means = []
            for k in retained_bins:
                if k < lo:
                    means.append(self.shape_step * (lo - k))
                elif k > hi and self.preset is PriorPreset.VShape:
                    means.append(self.shape_step * (k - hi))
                else:
                    means.append(0.0)
        else:
            means = [0.0] * K_eff
        if len(means) != K_eff or len(sds) != K_eff:
            raise ValueError(f"beta prior needs {K_eff} entries, got {len(means)} means and {len(sds)} sds")
        if any(s <= 0 for s in sds):
            raise ValueError("beta prior sds must be positive")
        return means, sds


def response_scale(y: np.ndarray) -> float:
    """Scale of the half-t prior on sigma_e: max(1, 2.5 * MAD(y))."""
    mad = float(stats.median_abs_deviation(np.asarray(y, dtype=float), scale="normal"))
    return max(1.0, 2.5 * mad)


class ModelSpec(BaseModel):
    variant: Variant = Variant.RandomSlopes
    N: int = Field(..., ge=1)
    K_eff: int = Field(..., ge=0)
    L: int = Field(..., ge=0)
    beta_means: List[float]
    beta_sds: List[float]
    coef_sd: float = Field(1.0, gt=0)
    group_sd_scale: float = Field(1.0, gt=0)
    sigma_e_df: float = Field(STUDENT_T_DF, gt=0)
    scale_e: float = Field(1.0, gt=0)
    lkj_eta: float = Field(LKJ_ETA, gt=0)
    likelihood_weight: float = Field(1.0, ge=0, le=1)
    preset: PriorPreset = PriorPreset.Default

    @classmethod
    def from_design(
        cls,
        design: DesignMatrix,
        variant: Variant = Variant.RandomSlopes,
        prior: Optional[PriorConfig] = None,
        lkj_eta: float = LKJ_ETA,
        likelihood_weight: float = 1.0,
    ) -> "ModelSpec":
        prior = prior or PriorConfig()
        means, sds = prior.resolve_beta(design.retained_bins, design.reference_bins)
        return cls(
            variant=variant,
            N=design.N,
            K_eff=design.K_eff,
            L=design.L,
            beta_means=means,
            beta_sds=sds,
            coef_sd=prior.coef_sd,
            group_sd_scale=prior.group_sd_scale,
            sigma_e_df=prior.sigma_e_df,
            scale_e=prior.sigma_e_scale or response_scale(design.y),
            lkj_eta=lkj_eta,
            likelihood_weight=likelihood_weight,
            preset=prior.preset,
        )

    @property
    def D(self) -> int:
        if self.variant is Variant.RandomSlopes:
            return self.K_eff + 1
        if self.variant is Variant.RandomIntercepts:
            return 1
        return 0

    @property
    def n_cpc(self) -> int:
        return self.D * (self.D - 1) // 2

    @property
    def dim(self) -> int:
        return 3 + self.K_eff + self.L + self.D + self.n_cpc + self.N * self.D


def parameter_slices(spec: ModelSpec) -> Dict[str, slice]:
    sizes = [
        ("alpha", 1), ("nu", 1), ("beta", spec.K_eff), ("gamma", spec.L), ("log_sigma_e", 1),
        ("log_tau", spec.D), ("cpc", spec.n_cpc), ("z", spec.N * spec.D),
    ]
    out: Dict[str, slice] = {}
    start = 0
    for name, size in sizes:
        out[name] = slice(start, start + size)
        start += size
    return out


@dataclass(frozen=True)
class Parameters:
    """Constrained view of a parameter vector."""

    alpha: float
    nu: float
    beta: np.ndarray
    gamma: np.ndarray
    sigma_e: float
    tau: np.ndarray  # (D,)
    L: np.ndarray  # (D, D)
    Z: np.ndarray  # (N, D)

    @property
    def E(self) -> np.ndarray:
        """Group effects, one row per country."""
        return (self.Z @ self.L.T) * self.tau

    @property
    def R(self) -> np.ndarray:
        return self.L @ self.L.T


# -------------------- Cholesky factors of correlation matrices --------------------
def _log1m_tanh2(y: np.ndarray) -> np.ndarray:
    """log(1 - tanh(y)^2), stable for large |y|."""
    a = np.abs(y)
    return 2.0 * (math.log(2.0) - a - np.log1p(np.exp(-2.0 * a)))


def cpc_to_cholesky(y: np.ndarray, D: int) -> Tuple[np.ndarray, float]:
    """Row-filling map from unconstrained CPCs to a correlation Cholesky factor.

    Returns the factor and the log absolute Jacobian determinant.
    """
    y = np.asarray(y, dtype=float)
    z = np.tanh(y)
    L = np.zeros((D, D))
    if D == 0:
        return L, 0.0
    L[0, 0] = 1.0
    log_jac = float(np.sum(_log1m_tanh2(y)))
    k = 0
    for i in range(1, D):
        s = np.float64(0.0)
        for j in range(i):
            if j > 0:
                log_jac += 0.5 * np.log1p(-s)
            L[i, j] = z[k] * np.sqrt(1.0 - s)
            s += L[i, j] ** 2
            k += 1
        L[i, i] = np.sqrt(max(1.0 - s, 0.0))
    return L, log_jac


def cholesky_to_cpc(L: np.ndarray) -> np.ndarray:
    D = L.shape[0]
    out = np.empty(D * (D - 1) // 2)
    k = 0
    for i in range(1, D):
        s = 0.0
        for j in range(i):
            out[k] = np.arctanh(L[i, j] / math.sqrt(1.0 - s))
            s += L[i, j] ** 2
            k += 1
    return out


def _cpc_backprop(y: np.ndarray, L: np.ndarray, gL: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the CPCs of <gL, L(y)> plus the transform's log Jacobian."""
    z = np.tanh(y)
    gy = np.zeros_like(y)
    D = L.shape[0]
    k = 0
    for i in range(1, D):
        s = np.zeros(i + 1)
        for j in range(i):
            s[j + 1] = s[j] + L[i, j] ** 2
        gs = gL[i, i] * (-0.5 / L[i, i])
        for j in reversed(range(i)):
            c = np.sqrt(1.0 - s[j])
            g_lij = gL[i, j] + gs * 2.0 * L[i, j]
            gz = g_lij * c
            gs = gs + g_lij * z[k + j] * (-0.5 / c)
            if j > 0:
                gs += -0.5 / (1.0 - s[j])
            gy[k + j] = gz * (1.0 - z[k + j] ** 2) - 2.0 * z[k + j]
        k += i
    return gy


def _lkj_coefficients(D: int, eta: float) -> np.ndarray:
    i = np.arange(D)
    coef = D - i + 2.0 * eta - 3.0
    coef[0] = 0.0
    return coef


def _lkj_unchecked(L: np.ndarray, eta: float) -> float:
    D = L.shape[0]
    if D < 2:
        return 0.0
    return float(np.sum(_lkj_coefficients(D, eta)[1:] * np.log(np.diag(L)[1:])))


def lkj_cholesky_logdensity(L: np.ndarray, eta: float) -> float:
    """LKJ(eta) log density of a correlation Cholesky factor, without normalizing constant.

    Equals sum_{i>=1} (D - i + 2*eta - 3) * log L[i, i] (0-based i), which is
    0 at the identity for every eta.
    """
    L = np.asarray(L, dtype=float)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise InvalidCholesky(f"Cholesky factor must be square, got shape {L.shape}")
    if not np.all(np.isfinite(L)):
        raise InvalidCholesky("Cholesky factor has non-finite entries")
    if np.any(np.abs(np.triu(L, 1)) > 1e-12):
        raise InvalidCholesky("Cholesky factor must be lower triangular")
    if np.any(np.diag(L) <= 0):
        raise InvalidCholesky("Cholesky factor must have a positive diagonal")
    if not np.allclose(np.sum(L ** 2, axis=1), 1.0, atol=1e-8):
        raise InvalidCholesky("rows of a correlation Cholesky factor must have unit norm")
    if not eta > 0:
        raise InvalidCholesky(f"eta must be positive, got {eta}")
    return _lkj_unchecked(L, eta)


def sample_lkj_cholesky(D: int, eta: float, rng: np.random.Generator) -> np.ndarray:
    """Draw a Cholesky factor from LKJ(eta) through Beta-distributed partial correlations."""
    if D == 0:
        return np.zeros((0, 0))
    cpc = np.empty(D * (D - 1) // 2)
    k = 0
    for i in range(1, D):
        for j in range(i):
            a = eta + (D - 2 - j) / 2.0
            cpc[k] = 2.0 * rng.beta(a, a) - 1.0
            k += 1
    L, _ = cpc_to_cholesky(np.arctanh(np.clip(cpc, -1 + 1e-15, 1 - 1e-15)), D)
    return L


# -------------------- transforms --------------------
def transform(theta: np.ndarray, spec: ModelSpec) -> Tuple[Parameters, float]:
    """Map an unconstrained vector to constrained parameters and the log Jacobian."""
    theta = np.asarray(theta, dtype=float)
    sl = parameter_slices(spec)
    u_sigma = float(theta[sl["log_sigma_e"]][0])
    u_tau = theta[sl["log_tau"]]
    L, jac_l = cpc_to_cholesky(theta[sl["cpc"]], spec.D)
    params = Parameters(
        alpha=float(theta[sl["alpha"]][0]),
        nu=float(theta[sl["nu"]][0]),
        beta=theta[sl["beta"]].copy(),
        gamma=theta[sl["gamma"]].copy(),
        sigma_e=math.exp(u_sigma),
        tau=np.exp(u_tau),
        L=L,
        Z=theta[sl["z"]].reshape(spec.N, spec.D).copy(),
    )
    return params, u_sigma + float(np.sum(u_tau)) + jac_l


def inverse_transform(params: Parameters, spec: ModelSpec) -> np.ndarray:
    parts = [
        [params.alpha, params.nu],
        np.asarray(params.beta, dtype=float),
        np.asarray(params.gamma, dtype=float),
        [math.log(params.sigma_e)],
        np.log(np.asarray(params.tau, dtype=float)),
        cholesky_to_cpc(np.asarray(params.L, dtype=float)) if spec.D else [],
        np.asarray(params.Z, dtype=float).reshape(-1),
    ]
    return np.concatenate([np.asarray(p, dtype=float).reshape(-1) for p in parts])


def _group_block(design: DesignMatrix, D: int) -> np.ndarray:
    """Per-row multipliers of the group effects: [1] or [1, F]."""
    ones = np.ones((design.n, 1))
    if D == 1:
        return ones
    return np.hstack([ones, design.F])


# -------------------- log density --------------------
def _normal_lpdf(x, mean, sd) -> float:
    x = np.asarray(x, dtype=float)
    sd = np.asarray(sd, dtype=float)
    return float(np.sum(-0.5 * LOG_2PI - np.log(sd) - 0.5 * ((x - mean) / sd) ** 2))


def _half_t_lpdf(x: float, df: float, scale: float) -> float:
    return (
        math.log(2.0) + gammaln((df + 1) / 2) - gammaln(df / 2) - 0.5 * math.log(df * math.pi)
        - math.log(scale) - (df + 1) / 2 * math.log1p((x / scale) ** 2 / df)
    )


def _half_normal_lpdf(x: np.ndarray, scale: float) -> float:
    return float(np.sum(0.5 * math.log(2.0 / math.pi) - math.log(scale) - 0.5 * (x / scale) ** 2))


def _evaluate(theta: np.ndarray, design: DesignMatrix, spec: ModelSpec, with_grad: bool):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.dim,):
        raise ValueError(f"parameter vector has shape {theta.shape}, expected ({spec.dim},)")
    sl = parameter_slices(spec)
    alpha = theta[sl["alpha"]][0]
    nu = theta[sl["nu"]][0]
    beta = theta[sl["beta"]]
    gamma = theta[sl["gamma"]]
    u_sigma = theta[sl["log_sigma_e"]][0]
    D, N = spec.D, spec.N
    m = np.asarray(spec.beta_means)
    s = np.asarray(spec.beta_sds)
    cs = spec.coef_sd
    w = spec.likelihood_weight

    with np.errstate(all="ignore"):
        sigma = math.exp(u_sigma) if u_sigma < 700 else math.inf
        # row-wise reductions keep each row's value independent of row order
        mu = nu * design.ylag + alpha + np.sum(design.F * beta, axis=1) + np.sum(design.X * gamma, axis=1)
        if D:
            u_tau = theta[sl["log_tau"]]
            tau = np.exp(u_tau)
            y_cpc = theta[sl["cpc"]]
            L, jac_l = cpc_to_cholesky(y_cpc, D)
            Z = theta[sl["z"]].reshape(N, D)
            ZL = Z @ L.T
            G = _group_block(design, D)
            mu = mu + np.sum((ZL * tau)[design.group] * G, axis=1)
        r = design.y - mu
        loglik = 0.0
        if w > 0:
            pointwise = -0.5 * LOG_2PI - u_sigma - 0.5 * (r / sigma) ** 2
            loglik = w * math.fsum(pointwise) if np.all(np.isfinite(pointwise)) else -math.inf

        terms = [
            loglik,
            _normal_lpdf(alpha, 0.0, cs),
            _normal_lpdf(nu, 0.0, cs),
            _normal_lpdf(beta, m, s),
            _normal_lpdf(gamma, 0.0, cs),
            _half_t_lpdf(sigma, spec.sigma_e_df, spec.scale_e),
            u_sigma,
        ]
        if D:
            terms += [
                _half_normal_lpdf(tau, spec.group_sd_scale),
                float(np.sum(u_tau)),
                _lkj_unchecked(L, spec.lkj_eta),
                jac_l,
                _normal_lpdf(Z, 0.0, 1.0),
            ]
        lp = math.fsum(terms) if all(math.isfinite(t) for t in terms) else -math.inf
        if math.isnan(lp):
            lp = -math.inf
        if not with_grad:
            return lp, None

        grad = np.zeros(spec.dim)
        gmu = w * r / sigma ** 2
        grad[sl["alpha"]] = np.sum(gmu) - alpha / cs ** 2
        grad[sl["nu"]] = gmu @ design.ylag - nu / cs ** 2
        grad[sl["beta"]] = design.F.T @ gmu - (beta - m) / s ** 2
        grad[sl["gamma"]] = design.X.T @ gmu - gamma / cs ** 2
        df, sc = spec.sigma_e_df, spec.scale_e
        d_prior_sigma = -(df + 1) * sigma / (sc ** 2 * df + sigma ** 2)
        grad[sl["log_sigma_e"]] = w * np.sum((r / sigma) ** 2 - 1.0) + sigma * d_prior_sigma + 1.0
        if D:
            gE = np.zeros((N, D))
            np.add.at(gE, design.group, gmu[:, None] * G)
            g_tau = np.sum(gE * ZL, axis=0) - tau / spec.group_sd_scale ** 2
            grad[sl["log_tau"]] = tau * g_tau + 1.0
            gEt = gE * tau
            grad[sl["z"]] = (gEt @ L - Z).reshape(-1)
            if D > 1:
                gL = gEt.T @ Z
                coef = _lkj_coefficients(D, spec.lkj_eta)
                idx = np.arange(1, D)
                gL[idx, idx] += coef[1:] / L[idx, idx]
                grad[sl["cpc"]] = _cpc_backprop(y_cpc, L, gL)
    return lp, grad


def log_posterior(theta: np.ndarray, design: DesignMatrix, spec: ModelSpec) -> float:
    """Log joint density in unconstrained coordinates; -inf when not finite."""
    return _evaluate(theta, design, spec, with_grad=False)[0]


def grad_log_posterior(theta: np.ndarray, design: DesignMatrix, spec: ModelSpec) -> np.ndarray:
    return _evaluate(theta, design, spec, with_grad=True)[1]


def log_posterior_and_grad(theta: np.ndarray, design: DesignMatrix, spec: ModelSpec) -> Tuple[float, np.ndarray]:
    return _evaluate(theta, design, spec, with_grad=True)


# -------------------- constrained draws --------------------
def coefficient_names(spec: ModelSpec, design: DesignMatrix) -> List[str]:
    """Names of the group-effect columns."""
    if spec.D == 0:
        return []
    names = ["Intercept"]
    if spec.D > 1:
        names += list(design.exposure_labels)
    return names


def constrained_labels(spec: ModelSpec, design: DesignMatrix) -> List[str]:
    labels = ["alpha", "nu"]
    labels += [f"beta[{b}]" for b in design.exposure_labels]
    labels += [f"gamma[{c}]" for c in design.covariate_labels]
    labels.append("sigma_e")
    coefs = coefficient_names(spec, design)
    labels += [f"sd[{c}]" for c in coefs]
    labels += [f"cor[{coefs[i]},{coefs[j]}]" for i in range(1, spec.D) for j in range(i)]
    labels += [f"r[{country},{c}]" for country in design.countries for c in coefs]
    return labels


def constrained_slices(spec: ModelSpec) -> Dict[str, slice]:
    D = spec.D
    sizes = [
        ("alpha", 1), ("nu", 1), ("beta", spec.K_eff), ("gamma", spec.L), ("sigma_e", 1),
        ("sd", D), ("cor", spec.n_cpc), ("r", spec.N * D),
    ]
    out: Dict[str, slice] = {}
    start = 0
    for name, size in sizes:
        out[name] = slice(start, start + size)
        start += size
    return out


def constrained_vector(theta: np.ndarray, spec: ModelSpec) -> np.ndarray:
    params, _ = transform(theta, spec)
    D = spec.D
    R = params.R
    cor = [R[i, j] for i in range(1, D) for j in range(i)]
    return np.concatenate([
        [params.alpha, params.nu],
        params.beta,
        params.gamma,
        [params.sigma_e],
        params.tau,
        np.asarray(cor, dtype=float),
        params.E.reshape(-1) if D else np.zeros(0),
    ])


def linear_predictor(draws: np.ndarray, design: DesignMatrix, spec: ModelSpec) -> np.ndarray:
    """mu for every (draw, row) from constrained draws of shape (S, P)."""
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    sl = constrained_slices(spec)
    D = spec.D
    G = _group_block(design, D) if D else None
    out = np.empty((draws.shape[0], design.n))
    for start in range(0, draws.shape[0], _DRAW_CHUNK):
        chunk = draws[start:start + _DRAW_CHUNK]
        mu = (
            chunk[:, sl["alpha"]]
            + chunk[:, sl["nu"]] * design.ylag[None, :]
            + chunk[:, sl["beta"]] @ design.F.T
            + chunk[:, sl["gamma"]] @ design.X.T
        )
        if D:
            r = chunk[:, sl["r"]].reshape(len(chunk), spec.N, D)
            mu = mu + np.einsum("snd,nd->sn", r[:, design.group, :], G)
        out[start:start + len(chunk)] = mu
    return out


def pointwise_loglik(draws: np.ndarray, design: DesignMatrix, spec: ModelSpec) -> np.ndarray:
    """Per-observation Normal log likelihood, shape (S, n)."""
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    sigma = draws[:, constrained_slices(spec)["sigma_e"]]
    mu = linear_predictor(draws, design, spec)
    z = (design.y[None, :] - mu) / sigma
    return -0.5 * LOG_2PI - np.log(sigma) - 0.5 * z ** 2


def sample_prior(spec: ModelSpec, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """Independent constrained draws from the prior, shape (n_draws, P)."""
    D, N = spec.D, spec.N
    rows = []
    for _ in range(n_draws):
        tau = np.abs(rng.normal(0.0, spec.group_sd_scale, size=D))
        L = sample_lkj_cholesky(D, spec.lkj_eta, rng)
        Z = rng.normal(size=(N, D))
        R = L @ L.T
        rows.append(np.concatenate([
            rng.normal(0.0, spec.coef_sd, size=2),
            rng.normal(spec.beta_means, spec.beta_sds),
            rng.normal(0.0, spec.coef_sd, size=spec.L),
            [abs(spec.scale_e * rng.standard_t(spec.sigma_e_df))],
            tau,
            [R[i, j] for i in range(1, D) for j in range(i)],
            ((Z @ L.T) * tau).reshape(-1),
        ]))
    return np.vstack(rows) if rows else np.zeros((0, constrained_slices(spec)["r"].stop))
