"""Estimation panel assembly and design matrices."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .errors import EmptyPanel, MalformedRow, NonPositiveValue, RankWarning, ValidationError
from .exposure import BinScheme, ExposureTable, scheme_from_bounds

logger = logging.getLogger(__name__)

SeriesSource = Union[str, Path, pd.DataFrame]

COVARIATES = ("log_gdp", "log_price_lag1")


def load_series(source: SeriesSource, name: str) -> pd.Series:
    """Read a ``country,year,value`` table into a Series keyed by (country, year).

    Blank values are kept as missing; non-positive values are rejected.
    """
    if isinstance(source, pd.DataFrame):
        frame = source.copy()
        origin = name
    else:
        origin = str(source)
        frame = pd.read_csv(source, dtype={"country": str})
    missing = [c for c in ("country", "year", "value") if c not in frame.columns]
    if missing:
        raise MalformedRow(f"{origin}: missing columns {missing}")
    frame["year"] = pd.to_numeric(frame["year"], errors="coerce")
    if frame["year"].isna().any():
        line = int(np.flatnonzero(frame["year"].isna().to_numpy())[0]) + 2
        raise MalformedRow(f"{origin}:{line}: cannot parse year")
    frame["value"] = pd.to_numeric(frame["value"], errors="coerce")
    nonpos = (frame["value"] <= 0).to_numpy()
    if nonpos.any():
        row = frame.iloc[int(np.flatnonzero(nonpos)[0])]
        raise NonPositiveValue(
            f"{name} must be positive: {row['country']} {int(row['year'])} has {row['value']}"
        )
    frame = frame.assign(country=frame["country"].astype(str).str.strip(), year=frame["year"].astype(int))
    if frame.duplicated(subset=["country", "year"]).any():
        raise MalformedRow(f"{origin}: duplicate (country, year) rows")
    return frame.set_index(["country", "year"])["value"].dropna().sort_index().rename(name)


def _lagged(series: pd.Series) -> pd.Series:
    """Value of year t-1 re-keyed to year t; gaps stay missing."""
    frame = series.reset_index()
    frame["year"] = frame["year"] + 1
    return frame.set_index(["country", "year"])[series.name].rename(f"{series.name}_lag1")


@dataclass(frozen=True)
class PanelDataset:
    frame: pd.DataFrame  # country, year, log_y, log_y_lag1, log_gdp, log_price_lag1
    exposure: np.ndarray  # (rows, K), row-aligned with frame
    scheme: BinScheme
    dropped: Dict[str, int] = field(default_factory=dict)

    @property
    def countries(self) -> List[str]:
        return sorted(self.frame["country"].unique())

    @property
    def country_index(self) -> Dict[str, int]:
        return {c: i for i, c in enumerate(self.countries)}

    @property
    def N(self) -> int:
        return len(self.countries)

    @property
    def T_i(self) -> Dict[str, int]:
        return {str(c): int(n) for c, n in self.frame.groupby("country").size().items()}

    @property
    def years(self) -> List[int]:
        return sorted(int(y) for y in self.frame["year"].unique())

    def between(self, first_year: int, last_year: int) -> "PanelDataset":
        mask = ((self.frame["year"] >= first_year) & (self.frame["year"] <= last_year)).to_numpy()
        if not mask.any():
            raise EmptyPanel(f"no panel rows between {first_year} and {last_year}")
        return PanelDataset(self.frame[mask].reset_index(drop=True), self.exposure[mask], self.scheme, {})


def _exposure_frame(exposure: ExposureTable) -> pd.DataFrame:
    idx = pd.MultiIndex.from_tuples(exposure.keys, names=["country", "year"])
    cols = [f"F{k}" for k in range(exposure.scheme.K)]
    return pd.DataFrame(exposure.values, index=idx, columns=cols)


def assemble_panel(
    energy: SeriesSource,
    gdp: SeriesSource,
    price: SeriesSource,
    exposure: ExposureTable,
) -> PanelDataset:
    """Join demand, GDP, price and exposure by (country, year) with one-year lags.

    Rows missing any ingredient are dropped; the count per reason is kept in
    ``PanelDataset.dropped``.
    """
    demand = load_series(energy, "energy")
    gdp_s = load_series(gdp, "gdp")
    price_s = load_series(price, "price")
    expo = _exposure_frame(exposure)

    log_y = np.log(demand).rename("log_y")
    log_price = np.log(price_s).rename("log_price")
    joined = pd.concat(
        [
            log_y,
            _lagged(log_y),
            np.log(gdp_s).rename("log_gdp"),
            _lagged(log_price),
        ],
        axis=1,
        join="outer",
    )
    joined = joined[joined["log_y"].notna()]
    joined = joined.join(expo, how="left")

    reasons = {
        "missing_demand_lag": joined["log_y_lag1"].isna(),
        "missing_gdp": joined["log_gdp"].isna(),
        "missing_price_lag": joined["log_price_lag1"].isna(),
        "missing_exposure": joined["F0"].isna(),
    }
    dropped = {name: int(mask.sum()) for name, mask in reasons.items()}
    keep = ~np.logical_or.reduce([m.to_numpy() for m in reasons.values()])
    retained = joined[keep].sort_index()
    if retained.empty:
        raise EmptyPanel("no (country, year) row has demand, its lag, GDP, lagged price and exposure")

    for reason, count in dropped.items():
        if count:
            logger.warning("Dropped %d panel rows: %s", count, reason)

    frame = retained[["log_y", "log_y_lag1", "log_gdp", "log_price_lag1"]].reset_index()
    frame["year"] = frame["year"].astype(int)
    F = retained[[f"F{k}" for k in range(exposure.scheme.K)]].to_numpy(dtype=float)
    panel = PanelDataset(frame=frame, exposure=F, scheme=exposure.scheme, dropped=dropped)
    logger.info("Assembled panel: %d rows, %d countries, years %d-%d",
                len(frame), panel.N, frame["year"].min(), frame["year"].max())
    return panel


@dataclass(frozen=True)
class DesignMatrix:
    y: np.ndarray
    ylag: np.ndarray
    F: np.ndarray  # (n, K_eff), reference bins removed
    X: np.ndarray  # (n, L), centered
    group: np.ndarray  # (n,) int group id
    countries: Tuple[str, ...]
    years: np.ndarray
    exposure_labels: Tuple[str, ...]
    covariate_labels: Tuple[str, ...]
    centers: Dict[str, float]
    reference_fraction: np.ndarray
    retained_bins: Tuple[int, ...]
    reference_bins: Tuple[int, ...] = ()

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def N(self) -> int:
        return len(self.countries)

    @property
    def K_eff(self) -> int:
        return int(self.F.shape[1])

    @property
    def L(self) -> int:
        return int(self.X.shape[1])

    @property
    def column_labels(self) -> List[str]:
        return ["log_y_lag1", *self.exposure_labels, *self.covariate_labels]

    def permuted(self, order: np.ndarray) -> "DesignMatrix":
        """Same design with rows reordered."""
        return DesignMatrix(
            self.y[order], self.ylag[order], self.F[order], self.X[order], self.group[order],
            self.countries, self.years[order], self.exposure_labels, self.covariate_labels,
            dict(self.centers), self.reference_fraction[order], self.retained_bins, self.reference_bins,
        )


def _warn_rank(message: str) -> None:
    logger.warning(message)
    warnings.warn(message, RankWarning, stacklevel=3)


def build_design(panel: PanelDataset, scheme: Optional[BinScheme] = None) -> DesignMatrix:
    """Drop reference-bin columns and center the covariates."""
    scheme = scheme or panel.scheme
    if panel.frame.empty:
        raise EmptyPanel("cannot build a design from an empty panel")
    if scheme.K != panel.exposure.shape[1]:
        raise ValidationError(
            f"scheme has {scheme.K} bins but the panel exposure has {panel.exposure.shape[1]} columns"
        )
    retained = tuple(scheme.retained_bins)
    reference = sorted(scheme.reference_bins)
    F = panel.exposure[:, list(retained)]
    ref_fraction = panel.exposure[:, reference].sum(axis=1) if reference else np.zeros(len(panel.frame))

    centers = {name: float(panel.frame[name].mean()) for name in COVARIATES}
    X = np.column_stack([panel.frame[name].to_numpy() - centers[name] for name in COVARIATES])

    countries = tuple(panel.countries)
    index = {c: i for i, c in enumerate(countries)}
    group = panel.frame["country"].map(index).to_numpy(dtype=np.int64)
    labels = tuple(scheme.label(k) for k in retained)

    for j, label in enumerate(labels):
        col = F[:, j]
        if np.ptp(col) == 0.0:
            _warn_rank(f"exposure column {label} is constant across the panel")
            continue
        for g, country in enumerate(countries):
            sub = col[group == g]
            if sub.size > 1 and np.ptp(sub) == 0.0 and sub[0] != 0.0:
                _warn_rank(f"exposure column {label} is constant and nonzero within {country}")
    for j, name in enumerate(COVARIATES):
        if np.ptp(X[:, j]) == 0.0:
            _warn_rank(f"covariate {name} is constant across the panel")

    logger.info("Design: n=%d, N=%d, K_eff=%d, L=%d", len(group), len(countries), F.shape[1], X.shape[1])
    return DesignMatrix(
        y=panel.frame["log_y"].to_numpy(dtype=float),
        ylag=panel.frame["log_y_lag1"].to_numpy(dtype=float),
        F=F,
        X=X,
        group=group,
        countries=countries,
        years=panel.frame["year"].to_numpy(dtype=np.int64),
        exposure_labels=labels,
        covariate_labels=COVARIATES,
        centers=centers,
        reference_fraction=ref_fraction,
        retained_bins=retained,
        reference_bins=tuple(reference),
    )


# -------------------- design.csv --------------------
_BIN_PREFIX = "bin:"


def _bin_column(lo: float, hi: float) -> str:
    return f"{_BIN_PREFIX}{lo!r}:{hi!r}"


def panel_to_frame(panel: PanelDataset) -> pd.DataFrame:
    """Panel rows with one ``bin:<lo>:<hi>`` column per exposure bin."""
    frame = panel.frame.copy()
    for k in range(panel.scheme.K):
        frame[_bin_column(*panel.scheme.bounds(k))] = panel.exposure[:, k]
    return frame


def panel_from_frame(frame: pd.DataFrame, reference_bins: Optional[List[int]] = None) -> PanelDataset:
    """Inverse of :func:`panel_to_frame`; ``reference_bins`` overrides the default reference."""
    bin_cols = [c for c in frame.columns if str(c).startswith(_BIN_PREFIX)]
    base = ["country", "year", "log_y", "log_y_lag1", *COVARIATES]
    missing = [c for c in base if c not in frame.columns]
    if missing or not bin_cols:
        raise MalformedRow(f"design table needs columns {base} and bin columns; missing {missing}")
    bounds = []
    for col in bin_cols:
        lo, hi = col[len(_BIN_PREFIX):].split(":")
        bounds.append((float(lo), float(hi)))
    order = np.argsort([b[0] for b in bounds], kind="stable")
    scheme = scheme_from_bounds([bounds[i] for i in order])
    if reference_bins is not None:
        scheme = scheme.with_reference(reference_bins)
    exposure = frame[[bin_cols[i] for i in order]].to_numpy(dtype=float)
    out = frame[base].copy()
    out["country"] = out["country"].astype(str)
    out["year"] = out["year"].astype(int)
    return PanelDataset(frame=out.reset_index(drop=True), exposure=exposure, scheme=scheme, dropped={})
