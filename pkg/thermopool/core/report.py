"""Posterior summaries and derived quantities: Koyck long-run effects,
elasticities, warming counterfactuals, rolling-window refits and prior
sensitivity tables."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import ROLLING_WINDOW_YEARS
from .diagnostics import split_rhat
from .errors import EmptyDraws, NonStationary, ValidationError, WindowTooWide, YearNotCovered
from .exposure import BinScheme, compute_exposure
from .gridio import CountryMap, PopulationGrid, TemperatureGrid
from .inference import ModelSpec, PriorConfig, Variant, constrained_slices
from .panel import DesignMatrix, PanelDataset, build_design
from .sampler import PosteriorDraws, SamplerConfig, WarmStart, run_chains, warm_warmup

logger = logging.getLogger(__name__)

QUANTILES = (0.025, 0.5, 0.975)
SUMMARY_COLUMNS = ["parameter", "rhat", "mean", "sd", "q2.5", "median", "q97.5"]


def model_spec(draws: PosteriorDraws) -> ModelSpec:
    """The model specification recorded with a fit."""
    if "spec" not in draws.metadata:
        raise ValidationError("draws carry no model specification")
    return ModelSpec.model_validate(draws.metadata["spec"])


def _exact_mean(x: np.ndarray) -> float:
    return math.fsum(x) / x.size


def _exact_sd(x: np.ndarray) -> float:
    if x.size < 2:
        return 0.0
    m = _exact_mean(x)
    return math.sqrt(math.fsum((x - m) ** 2) / (x.size - 1))


def _describe(x: np.ndarray) -> Dict[str, float]:
    q = np.quantile(x, QUANTILES)
    return {"mean": _exact_mean(x), "sd": _exact_sd(x), "q2.5": q[0], "median": q[1], "q97.5": q[2]}


def summarize(draws: PosteriorDraws, labels: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """R-hat, mean, sd and 2.5/50/97.5% quantiles per parameter."""
    if draws.draws.size == 0:
        raise EmptyDraws("cannot summarize empty draws")
    rows = []
    for label in labels or draws.column_labels:
        chains = draws.column(label)
        try:
            rhat = split_rhat(chains)
        except ValidationError:
            rhat = math.nan
        rows.append({"parameter": label, "rhat": rhat, **_describe(chains.reshape(-1))})
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


# -------------------- Koyck lag --------------------
def koyck_long_run(effect: float, nu: float) -> float:
    """Long-run effect of a persistent shock under a lagged dependent variable."""
    if not abs(nu) < 1:
        raise NonStationary(f"|nu| = {abs(nu)} >= 1 has no long-run equilibrium")
    return effect / (1.0 - nu)


def _stationary(draws: PosteriorDraws) -> Tuple[np.ndarray, int]:
    nu = draws.column("nu").reshape(-1)
    keep = np.abs(nu) < 1
    excluded = int((~keep).sum())
    if excluded:
        logger.warning("Excluded %d non-stationary draws (|nu| >= 1)", excluded)
    if not keep.any():
        raise NonStationary("every draw has |nu| >= 1")
    return keep, excluded


def koyck_table(draws: PosteriorDraws, shift: float = 0.10) -> pd.DataFrame:
    """Percent demand change from shifting ``shift`` of exposure into each bin."""
    keep, excluded = _stationary(draws)
    nu = draws.column("nu").reshape(-1)[keep]
    rows = []
    for label in draws.column_labels:
        if not label.startswith("beta["):
            continue
        beta = draws.column(label).reshape(-1)[keep]
        long_log = shift * beta / (1.0 - nu)
        for horizon, values in (
            ("short_run", shift * beta * 100.0),
            ("long_run", long_log * 100.0),
            ("long_run_exact", np.expm1(long_log) * 100.0),
        ):
            rows.append({"parameter": label, "horizon": horizon, **_describe(values), "excluded": excluded})
    return pd.DataFrame(rows)


def elasticity_table(draws: PosteriorDraws) -> pd.DataFrame:
    """Short-run (gamma) and long-run (gamma / (1 - nu)) covariate elasticities."""
    keep, excluded = _stationary(draws)
    nu = draws.column("nu").reshape(-1)
    rows = []
    for label in draws.column_labels:
        if not label.startswith("gamma["):
            continue
        gamma = draws.column(label).reshape(-1)
        rows.append({"parameter": label, "horizon": "short_run", **_describe(gamma), "excluded": 0})
        long_run = gamma[keep] / (1.0 - nu[keep])
        rows.append({"parameter": label, "horizon": "long_run", **_describe(long_run), "excluded": excluded})
    return pd.DataFrame(rows)


# -------------------- group effects --------------------
def group_effects_table(draws: PosteriorDraws) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Country deviations with 90% intervals, and the posterior-mean correlation matrix."""
    rows = []
    for label in draws.column_labels:
        if not label.startswith("r["):
            continue
        country, coef = label[2:-1].split(",", 1)
        x = draws.column(label).reshape(-1)
        q5, q95 = np.quantile(x, [0.05, 0.95])
        rows.append({"country": country, "coefficient": coef, "mean": _exact_mean(x),
                     "sd": _exact_sd(x), "q5": q5, "q95": q95})
    effects = pd.DataFrame(rows, columns=["country", "coefficient", "mean", "sd", "q5", "q95"])

    coefs = [label[3:-1] for label in draws.column_labels if label.startswith("sd[")]
    R = np.eye(len(coefs))
    # bin labels contain commas, so look pairs up instead of splitting
    for i in range(1, len(coefs)):
        for j in range(i):
            label = f"cor[{coefs[i]},{coefs[j]}]"
            if label in draws.column_labels:
                R[i, j] = R[j, i] = _exact_mean(draws.column(label).reshape(-1))
    return effects, pd.DataFrame(R, index=coefs, columns=coefs)


# -------------------- counterfactual --------------------
@dataclass
class CounterfactualResult:
    table: pd.DataFrame
    total_pct_change: float
    delta_t: float
    base_year: int
    mode: str


def _year_grid(tg: TemperatureGrid, year: int) -> TemperatureGrid:
    mask = (tg.records["timestamp"].dt.year == year).to_numpy()
    return TemperatureGrid(tg.records[mask].reset_index(drop=True), tg.cell_meta)


def _country_population(pg: PopulationGrid, cm: CountryMap, year: int) -> pd.Series:
    pop = pg.for_year(year)
    frame = pd.DataFrame({"population": pop.to_numpy(), "country": cm.assignment.reindex(pop.index).to_numpy()})
    return frame.dropna().groupby("country")["population"].sum()


def warming_counterfactual(
    draws: PosteriorDraws,
    tg: TemperatureGrid,
    pg: PopulationGrid,
    cm: CountryMap,
    scheme: BinScheme,
    design: DesignMatrix,
    delta_t: float,
    base_year: int,
    mode: str = "mean",
    day_window: Tuple[int, int] = (6, 21),
    absolute: bool = False,
) -> CounterfactualResult:
    """Demand change per country when every base-year temperature rises by ``delta_t``.

    ``mode="mean"`` uses posterior-mean parameters; ``mode="full"`` propagates
    every draw and adds 2.5/97.5% bounds. With ``absolute=True`` demand levels
    are per-capita demand times the country's base-year population.
    """
    if mode not in ("mean", "full"):
        raise ValidationError(f"unknown counterfactual mode {mode!r}")
    if base_year not in tg.years or base_year not in set(pg.counts["year"].tolist()):
        raise YearNotCovered(f"base year {base_year} is not covered by both grids")
    spec = model_spec(draws)
    grid = _year_grid(tg, base_year)
    base = compute_exposure(grid, pg, cm, scheme, day_window)
    shifted = compute_exposure(grid.shifted(delta_t), pg, cm, scheme, day_window)
    retained = list(design.retained_bins)
    pop = _country_population(pg, cm, base_year) if absolute else None

    sl = constrained_slices(spec)
    pool = draws.matrix()
    params = pool.mean(axis=0, keepdims=True) if mode == "mean" else pool
    beta = params[:, sl["beta"]]
    nu = params[:, sl["nu"]][:, 0]
    r = params[:, sl["r"]].reshape(len(params), spec.N, spec.D) if spec.D else None

    rows = []
    for g, country in enumerate(design.countries):
        key = (country, base_year)
        at = np.flatnonzero((design.group == g) & (design.years == base_year))
        if key not in base.keys or at.size == 0:
            logger.warning("Counterfactual skips %s: no %d exposure or panel row", country, base_year)
            continue
        dF = shifted.row(country, base_year)[retained] - base.row(country, base_year)[retained]
        slope = beta.copy()
        if spec.D > 1:
            slope = slope + r[:, g, 1:]
        d_mu = slope @ dF
        level = math.exp(design.y[at[0]])
        if pop is not None:
            level *= float(pop.get(country, 0.0))
        pct = np.expm1(d_mu) * 100.0
        long_pct = np.where(np.abs(nu) < 1, np.expm1(d_mu / (1.0 - nu)) * 100.0, np.nan)
        row = {
            "country": country,
            "baseline_demand": level,
            "counterfactual_demand": level * math.exp(float(np.mean(d_mu))) if mode == "mean"
            else level * float(np.mean(np.exp(d_mu))),
            "pct_change": float(pct[0]) if mode == "mean" else float(np.mean(pct)),
            "long_run_pct_change": float(np.nanmean(long_pct)),
        }
        if mode == "full":
            row["pct_q2.5"], row["pct_q97.5"] = (float(v) for v in np.quantile(pct, [0.025, 0.975]))
        rows.append(row)
    table = pd.DataFrame(rows)
    if table.empty:
        raise YearNotCovered(f"no fitted country has both exposure and a panel row in {base_year}")
    base_total = math.fsum(table["baseline_demand"])
    cf_total = math.fsum(table["counterfactual_demand"])
    total = (cf_total - base_total) / base_total * 100.0 if base_total > 0 else math.nan
    logger.info("Counterfactual +%.2f C in %d: total change %.4f%%", delta_t, base_year, total)
    return CounterfactualResult(table, total, float(delta_t), int(base_year), mode)


# -------------------- rolling windows --------------------
@dataclass
class WindowResult:
    first_year: int
    last_year: int
    summary: pd.DataFrame


def rolling_windows(
    panel: PanelDataset,
    config: Optional[SamplerConfig] = None,
    window: int = ROLLING_WINDOW_YEARS,
    variant: Variant = Variant.RandomSlopes,
    prior: Optional[PriorConfig] = None,
    lkj_eta: float = 2.0,
    design_builder: Callable[[PanelDataset], DesignMatrix] = build_design,
) -> List[WindowResult]:
    """Refit on every contiguous ``window``-year span, sliding by one year.

    Each window after the first starts from the previous window's adapted step
    sizes and metric and runs a shortened warmup when the parameter count matches.
    """
    years = panel.years
    first, last = years[0], years[-1]
    if window < 1 or window > last - first + 1:
        raise WindowTooWide(f"window of {window} years exceeds the panel span {first}-{last}")
    config = config or SamplerConfig()
    warm: Optional[WarmStart] = None
    results = []
    for start in range(first, last - window + 2):
        sub = panel.between(start, start + window - 1)
        design = design_builder(sub)
        spec = ModelSpec.from_design(design, variant, prior, lkj_eta)
        window_config = config
        if warm is not None and warm.fits(spec.dim):
            window_config = config.model_copy(update={"n_warmup": warm_warmup(config.n_warmup)})
        draws = run_chains(design, spec, window_config, warm_start=warm)
        warm = WarmStart.from_draws(draws)
        betas = [label for label in draws.column_labels if label.startswith("beta[")]
        results.append(WindowResult(start, start + window - 1, summarize(draws, betas)))
        logger.info("Window %d-%d fitted", start, start + window - 1)
    return results


def windows_frame(results: Sequence[WindowResult]) -> pd.DataFrame:
    frames = []
    for res in results:
        frame = res.summary.copy()
        frame.insert(0, "last_year", res.last_year)
        frame.insert(0, "first_year", res.first_year)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()


# -------------------- prior sensitivity --------------------
def sensitivity_rows(name: str, draws: PosteriorDraws) -> pd.DataFrame:
    rows = []
    for label in draws.column_labels:
        if not label.startswith("beta["):
            continue
        x = draws.column(label).reshape(-1)
        q = np.quantile(x, [0.05, 0.25, 0.75, 0.95])
        rows.append({"fit": name, "parameter": label, "mean": _exact_mean(x),
                     "q5": q[0], "q25": q[1], "q75": q[2], "q95": q[3]})
    return pd.DataFrame(rows)


def prior_sensitivity(
    design: DesignMatrix,
    presets: Sequence[str] = ("default", "vshape", "tight", "wide"),
    etas: Sequence[float] = (2.0,),
    config: Optional[SamplerConfig] = None,
    variant: Variant = Variant.RandomSlopes,
) -> pd.DataFrame:
    """Refit one design under each prior preset and LKJ shape; beta means with 50%/90% intervals."""
    frames = []
    for preset in presets:
        for eta in etas:
            spec = ModelSpec.from_design(design, variant, PriorConfig.from_preset(preset), eta)
            draws = run_chains(design, spec, config)
            frames.append(sensitivity_rows(f"{preset}/eta={eta:g}", draws))
    return pd.concat(frames, ignore_index=True)
