"""Two-way fixed-effects baseline on day-count temperature bins.

Country and year effects are absorbed by alternating projections; standard
errors are cluster-robust by country.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .errors import EmptyPanel, RankDeficient, TooFewClusters, ValidationError
from .exposure import DayCountTable
from .panel import SeriesSource, _lagged, load_series

logger = logging.getLogger(__name__)

DEMEAN_TOL = 1e-10
DEMEAN_MAX_ITER = 10_000
CLUSTER_NOTE = "clustered by country"


@dataclass(frozen=True)
class TwfePanel:
    frame: pd.DataFrame  # country, year, log_y, regressors, optional extras
    regressors: List[str]

    @property
    def countries(self) -> List[str]:
        return sorted(self.frame["country"].unique())


def assemble_twfe_panel(
    energy: SeriesSource,
    gdp: SeriesSource,
    population: SeriesSource,
    daycounts: DayCountTable,
    price: Optional[SeriesSource] = None,
) -> TwfePanel:
    """Join demand, GDP, population and day counts; reference day-count bins are dropped."""
    log_y = np.log(load_series(energy, "energy")).rename("log_y")
    log_gdp = np.log(load_series(gdp, "gdp")).rename("log_gdp")
    log_pop = np.log(load_series(population, "population")).rename("log_pop")
    parts = [log_y, _lagged(log_y), log_pop, log_pop.pow(2).rename("log_pop_sq"),
             log_gdp, log_gdp.pow(2).rename("log_gdp_sq")]
    if price is not None:
        parts.append(_lagged(np.log(load_series(price, "price")).rename("log_price")))
    joined = pd.concat(parts, axis=1, join="outer")

    scheme = daycounts.scheme
    retained = scheme.retained_bins
    day_cols = [f"days{scheme.label(k)}" for k in retained]
    days = pd.DataFrame(
        daycounts.values[:, retained],
        index=pd.MultiIndex.from_tuples(daycounts.keys, names=["country", "year"]),
        columns=day_cols,
    )
    joined = joined.join(days, how="inner")
    core = ["log_y", *day_cols, "log_pop", "log_pop_sq", "log_gdp", "log_gdp_sq"]
    before = len(joined)
    joined = joined.dropna(subset=core).sort_index()
    if joined.empty:
        raise EmptyPanel("no (country, year) row has demand, population, GDP and day counts")
    if before - len(joined):
        logger.warning("Dropped %d rows with missing TWFE inputs", before - len(joined))
    frame = joined.reset_index()
    regressors = [*day_cols, "log_pop", "log_pop_sq", "log_gdp", "log_gdp_sq"]
    return TwfePanel(frame=frame, regressors=regressors)


@dataclass
class TwfeFit:
    coefficients: pd.Series
    vcov: pd.DataFrame
    n_obs: int
    n_countries: int
    n_years: int
    iterations: int
    cluster: str = CLUSTER_NOTE

    @property
    def se(self) -> pd.Series:
        return pd.Series(np.sqrt(np.clip(np.diag(self.vcov.to_numpy()), 0.0, None)),
                         index=self.coefficients.index)

    def to_frame(self) -> pd.DataFrame:
        se = self.se.reindex(self.coefficients.index)
        return pd.DataFrame({
            "term": self.coefficients.index,
            "estimate": self.coefficients.to_numpy(),
            "cluster_se": se.to_numpy(),
            "t_stat": (self.coefficients / se).to_numpy(),
            "note": CLUSTER_NOTE,
        })


def _group_codes(values: pd.Series) -> np.ndarray:
    return pd.factorize(values, sort=True)[0]


def _demean(M: np.ndarray, groups: Sequence[np.ndarray]) -> tuple[np.ndarray, int]:
    """Alternating projections onto the complement of each set of group dummies."""
    M = M.astype(float, copy=True)
    counts = [np.bincount(g) for g in groups]
    for it in range(1, DEMEAN_MAX_ITER + 1):
        change = 0.0
        for g, cnt in zip(groups, counts):
            means = np.vstack([np.bincount(g, weights=M[:, j], minlength=cnt.size) / cnt
                               for j in range(M.shape[1])]).T
            step = means[g]
            M -= step
            change = max(change, float(np.max(np.abs(step))) if step.size else 0.0)
        if change < DEMEAN_TOL:
            return M, it
    logger.warning("Demeaning stopped after %d iterations without reaching %.0e", DEMEAN_MAX_ITER, DEMEAN_TOL)
    return M, DEMEAN_MAX_ITER


def _fit(y: np.ndarray, X: np.ndarray, country: pd.Series, year: pd.Series, names: List[str]) -> TwfeFit:
    c_codes, t_codes = _group_codes(country), _group_codes(year)
    G, T = int(c_codes.max()) + 1, int(t_codes.max()) + 1
    if G < 2:
        raise TooFewClusters(f"cluster-robust errors need at least 2 countries, got {G}")
    if T < 2:
        raise ValidationError(f"two-way fixed effects need at least 2 years, got {T}")
    demeaned, iterations = _demean(np.column_stack([y, X]), [c_codes, t_codes])
    yd, Xd = demeaned[:, 0], demeaned[:, 1:]
    n, k = Xd.shape
    if np.linalg.matrix_rank(Xd) < k:
        raise RankDeficient(f"regressors are collinear after removing fixed effects: {names}")
    beta, *_ = np.linalg.lstsq(Xd, yd, rcond=None)
    resid = yd - Xd @ beta

    bread = np.linalg.inv(Xd.T @ Xd)
    meat = np.zeros((k, k))
    for g in range(G):
        score = Xd[c_codes == g].T @ resid[c_codes == g]
        meat += np.outer(score, score)
    factor = G / (G - 1) * (n - 1) / (n - k)
    V = factor * bread @ meat @ bread
    V = 0.5 * (V + V.T)
    logger.info("TWFE fit: n=%d, countries=%d, years=%d, %d regressors, %d demeaning passes",
                n, G, T, k, iterations)
    return TwfeFit(
        coefficients=pd.Series(beta, index=names),
        vcov=pd.DataFrame(V, index=names, columns=names),
        n_obs=n, n_countries=G, n_years=T, iterations=iterations,
    )


def twfe_fit(panel: TwfePanel, columns: Optional[Sequence[str]] = None) -> TwfeFit:
    """Within estimator with country and year effects; cluster-robust covariance."""
    names = list(columns or panel.regressors)
    frame = panel.frame.dropna(subset=["log_y", *names])
    return _fit(
        frame["log_y"].to_numpy(dtype=float), frame[names].to_numpy(dtype=float),
        frame["country"], frame["year"], names,
    )


def twfe_augmented(
    panel: TwfePanel,
    extra: Union[Sequence[str], Mapping[str, np.ndarray]] = ("log_y_lag1", "log_price_lag1"),
) -> TwfeFit:
    """twfe_fit with additional regressors, given as frame columns or named arrays.

    All-zero extra columns carry no information; they are left out of the fit
    and reported with a NaN estimate.
    """
    frame = panel.frame.copy()
    if isinstance(extra, Mapping):
        for name, values in extra.items():
            frame[name] = np.asarray(values, dtype=float)
        extra_names = list(extra)
    else:
        extra_names = list(extra)
    missing = [c for c in extra_names if c not in frame.columns]
    if missing:
        raise ValidationError(f"extra regressors not in the panel: {missing}")
    frame = frame.dropna(subset=["log_y", *panel.regressors, *extra_names])
    zero = [c for c in extra_names if np.all(frame[c].to_numpy() == 0.0)]
    used = [*panel.regressors, *[c for c in extra_names if c not in zero]]
    X = np.column_stack([frame[c].to_numpy(dtype=float) for c in used])
    fit = _fit(frame["log_y"].to_numpy(dtype=float), X, frame["country"], frame["year"], used)
    if zero:
        logger.info("Extra regressors %s are identically zero; not estimated", zero)
        names = [*used, *zero]
        fit.coefficients = fit.coefficients.reindex(names)
        fit.vcov = fit.vcov.reindex(index=names, columns=names)
    return fit
