"""Seeded synthetic data: gridded weather, population and a demand panel with known parameters."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from .config import LKJ_ETA, REFERENCE_FALLBACK
from .exposure import BinScheme, ExposureTable, compute_exposure, make_bin_scheme
from .gridio import CountryMap, PopulationGrid, TemperatureGrid, temperature_frame
from .inference import Variant, sample_lkj_cholesky
from .storage import atomic_write, write_csv

logger = logging.getLogger(__name__)

GRID_SUBDIR = "grid"
TRUTH_FILE = "truth.json"
SLOT_HOURS = 3


class SimulationConfig(BaseModel):
    """Data-generating process settings."""

    n_countries: int = Field(6, ge=1)
    n_years: int = Field(8, ge=2)
    first_year: int = 2000
    cells_per_country: int = Field(3, ge=1)
    days_per_year: int = Field(6, ge=1, le=365)
    width: float = Field(3.5, gt=0)
    variant: Variant = Variant.RandomSlopes
    alpha: float = 0.5
    nu: float = Field(0.6, gt=-1, lt=1)
    sigma_e: float = Field(0.02, gt=0)
    beta_scale: float = 0.05
    gamma: Tuple[float, float] = (0.1, -0.05)
    tau_intercept: float = Field(0.1, gt=0)
    tau_slope: float = Field(0.03, gt=0)
    lkj_eta: float = Field(LKJ_ETA, gt=0)
    seed: int = 42


@dataclass
class SimulatedData:
    config: SimulationConfig
    scheme: BinScheme
    temperature: TemperatureGrid
    population_grid: PopulationGrid
    country_map: CountryMap
    exposure: ExposureTable
    energy: pd.DataFrame
    gdp: pd.DataFrame
    price: pd.DataFrame
    population: pd.DataFrame
    truth: Dict[str, float] = field(default_factory=dict)


def _countries(n: int) -> List[str]:
    return [f"C{i:02d}" for i in range(n)]


def _series(rows: List[Tuple[str, int, float]]) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=["country", "year", "value"])


def _simulate_grid(config: SimulationConfig, rng: np.random.Generator):
    countries = _countries(config.n_countries)
    years = list(range(config.first_year, config.first_year + config.n_years))
    step = max(1, 365 // config.days_per_year)
    # last sampled day must stay inside a 365-day year
    first_day = min(15, 365 - (config.days_per_year - 1) * step)
    days = [first_day + i * step for i in range(config.days_per_year)]

    mapping, pop_rows, frames = [], [], []
    cell = 0
    for country in countries:
        climate = rng.uniform(-2.0, 28.0)
        seasonal = rng.uniform(3.0, 12.0)
        lon0 = rng.uniform(-150.0, 150.0)
        lat0 = rng.uniform(-50.0, 60.0)
        for _ in range(config.cells_per_country):
            lon = lon0 + rng.uniform(-2.0, 2.0)
            offset = rng.normal(0.0, 2.0)
            base_pop = rng.uniform(1e3, 1e5)
            growth = rng.uniform(0.0, 0.03)
            mapping.append((cell, country, lat0 + rng.uniform(-2.0, 2.0), lon))
            for y_idx, year in enumerate(years):
                pop_rows.append((cell, year, round(base_pop * (1.0 + growth) ** y_idx, 3)))
                stamps = pd.DatetimeIndex([
                    pd.Timestamp(year=year, month=1, day=1) + pd.Timedelta(days=d - 1, hours=h)
                    for d in days for h in range(0, 24, SLOT_HOURS)
                ])
                doy = stamps.dayofyear.to_numpy()
                local_hour = (stamps.hour.to_numpy() + lon / 15.0) % 24
                temps = (
                    climate + offset + 0.02 * y_idx
                    + seasonal * np.cos(2 * np.pi * (doy - 200) / 365.0)
                    + 4.0 * np.cos(2 * np.pi * (local_hour - 15.0) / 24.0)
                    + rng.normal(0.0, 2.0, size=len(stamps))
                )
                frames.append(pd.DataFrame({
                    "cell_id": cell,
                    "timestamp": stamps,
                    "temp_c": np.round(np.clip(temps, -60.0, 50.0), 3),
                }))
            cell += 1

    records = pd.concat(frames, ignore_index=True)
    records = records.sort_values(["cell_id", "timestamp"], kind="mergesort").reset_index(drop=True)
    meta = pd.DataFrame(mapping, columns=["cell_id", "country", "lat", "lon"]).set_index("cell_id")
    tg = TemperatureGrid(records=records, cell_meta=meta[["lat", "lon"]])
    pg = PopulationGrid(counts=pd.DataFrame(pop_rows, columns=["cell_id", "year", "population"]))
    cm = CountryMap(assignment=meta["country"].rename("country"))
    return tg, pg, cm


def _true_beta(scheme: BinScheme, scale: float) -> np.ndarray:
    """V-shaped response around the comfortable range; zero on reference bins."""
    out = []
    for k in scheme.retained_bins:
        lo, hi = scheme.bounds(k)
        if math.isinf(lo):
            lo = hi - scheme.width
        if math.isinf(hi):
            hi = lo + scheme.width
        out.append(scale * abs(0.5 * (lo + hi) - REFERENCE_FALLBACK) / scheme.width)
    return np.asarray(out)


def simulate(config: Optional[SimulationConfig] = None) -> SimulatedData:
    """Generate grids, the implied exposure and a dynamic demand panel.

    Covariates enter the demand equation centered on their panel means, so the
    recorded ``alpha`` is the intercept of the centered model.
    """
    config = config or SimulationConfig()
    rng = np.random.default_rng(config.seed)
    scheme = make_bin_scheme(config.width)
    tg, pg, cm = _simulate_grid(config, rng)
    exposure = compute_exposure(tg, pg, cm, scheme, threads=1)

    countries = _countries(config.n_countries)
    years = list(range(config.first_year, config.first_year + config.n_years))
    retained = scheme.retained_bins
    labels = [scheme.label(k) for k in retained]
    K_eff = len(retained)
    beta = _true_beta(scheme, config.beta_scale)
    gamma = np.asarray(config.gamma, dtype=float)

    if config.variant is Variant.RandomSlopes:
        D = K_eff + 1
    elif config.variant is Variant.RandomIntercepts:
        D = 1
    else:
        D = 0
    tau = np.array([config.tau_intercept] + [config.tau_slope] * (D - 1))[:D]
    L = sample_lkj_cholesky(D, config.lkj_eta, rng)
    effects = (rng.standard_normal((len(countries), D)) @ L.T) * tau if D else np.zeros((len(countries), 0))

    log_gdp = {c: rng.uniform(8.0, 11.0) + 0.02 * np.arange(len(years)) + rng.normal(0, 0.05, len(years))
               for c in countries}
    log_price = {c: rng.uniform(-2.5, -1.0) + np.cumsum(rng.normal(0, 0.05, len(years) + 1))
                 for c in countries}
    centers = np.array([
        np.mean([v for c in countries for v in log_gdp[c]]),
        np.mean([v for c in countries for v in log_price[c][:-1]]),
    ])

    energy_rows, gdp_rows, price_rows, pop_rows = [], [], [], []
    for i, country in enumerate(countries):
        a_i = effects[i, 0] if D else 0.0
        slopes = beta + (effects[i, 1:] if D > 1 else 0.0)
        F0 = exposure.row(country, years[0])[retained]
        y = (config.alpha + a_i + F0 @ slopes) / (1.0 - config.nu)
        energy_rows.append((country, years[0] - 1, math.exp(y)))
        price_rows.append((country, years[0] - 1, math.exp(log_price[country][0])))
        for t, year in enumerate(years):
            F = exposure.row(country, year)[retained]
            x = np.array([log_gdp[country][t], log_price[country][t]]) - centers
            mu = config.alpha + a_i + config.nu * y + F @ slopes + x @ gamma
            y = mu + rng.normal(0.0, config.sigma_e)
            energy_rows.append((country, year, math.exp(y)))
            gdp_rows.append((country, year, math.exp(log_gdp[country][t])))
            price_rows.append((country, year, math.exp(log_price[country][t + 1])))
            cells = cm.cells_of(country)
            pop_rows.append((country, year, math.fsum(pg.for_year(year).reindex(cells).fillna(0.0))))

    truth: Dict[str, float] = {"alpha": config.alpha, "nu": config.nu}
    truth.update({f"beta[{b}]": float(v) for b, v in zip(labels, beta)})
    truth.update({f"gamma[{c}]": float(v) for c, v in zip(("log_gdp", "log_price_lag1"), gamma)})
    truth["sigma_e"] = config.sigma_e
    coefs = (["Intercept"] + labels)[:D]
    truth.update({f"sd[{c}]": float(v) for c, v in zip(coefs, tau)})
    R = L @ L.T
    truth.update({f"cor[{coefs[i]},{coefs[j]}]": float(R[i, j]) for i in range(1, D) for j in range(i)})
    truth.update({f"r[{country},{c}]": float(effects[g, d])
                  for g, country in enumerate(countries) for d, c in enumerate(coefs)})

    logger.info("Simulated %d countries x %d years (%s, seed %d)",
                len(countries), len(years), config.variant.value, config.seed)
    return SimulatedData(
        config=config, scheme=scheme, temperature=tg, population_grid=pg, country_map=cm,
        exposure=exposure, energy=_series(energy_rows), gdp=_series(gdp_rows),
        price=_series(price_rows), population=_series(pop_rows), truth=truth,
    )


def write_simulation(data: SimulatedData, out_dir: str | Path) -> List[Path]:
    """Write ``grid/`` (temperature, population, mapping), the panel series and truth.json."""
    out_dir = Path(out_dir)
    grid = out_dir / GRID_SUBDIR
    temperature = temperature_frame(data.temperature)
    mapping = data.temperature.cell_meta.join(data.country_map.assignment).reset_index()
    written = {
        grid / "temperature.csv": temperature,
        grid / "population.csv": data.population_grid.counts,
        grid / "mapping.csv": mapping[["cell_id", "country", "lat", "lon"]],
        out_dir / "energy.csv": data.energy,
        out_dir / "gdp.csv": data.gdp,
        out_dir / "price.csv": data.price,
        out_dir / "population.csv": data.population,
    }
    for path, frame in written.items():
        write_csv(path, frame)
    truth_path = out_dir / TRUTH_FILE
    payload = {"config": data.config.model_dump(mode="json"), "parameters": data.truth}
    atomic_write(truth_path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return [*written, truth_path]
