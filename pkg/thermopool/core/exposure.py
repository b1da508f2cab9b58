"""Temperature bin schemes and population-weighted exposure indices."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import (
    ALL_WIDTHS,
    BIN_LOWER,
    BIN_UPPER,
    BIN_WIDTH,
    REFERENCE_FALLBACK,
    REFERENCE_RANGE,
    REPLICATION_LOWER,
    REPLICATION_REFERENCE,
    REPLICATION_UPPER,
    REPLICATION_WIDTH,
    THREADS,
)
from .errors import InvalidWidth, InvertedRange, NoRetainedHours, YearNotCovered, ZeroPopulation
from .gridio import CountryMap, PopulationGrid, TemperatureGrid

logger = logging.getLogger(__name__)

_EDGE_DECIMALS = 10


@dataclass(frozen=True)
class BinScheme:
    """Ordered bin edges: bin 0 is (-inf, edges[0]), bin K-1 is [edges[-1], inf)."""

    lower: float
    upper: float
    width: float
    edges: Tuple[float, ...]
    reference_bins: FrozenSet[int]

    @property
    def K(self) -> int:
        return len(self.edges) + 1

    def bounds(self, k: int) -> Tuple[float, float]:
        lo = -math.inf if k == 0 else self.edges[k - 1]
        hi = math.inf if k == self.K - 1 else self.edges[k]
        return lo, hi

    def label(self, k: int) -> str:
        lo, hi = self.bounds(k)
        if math.isinf(lo):
            return f"<{hi:g}"
        if math.isinf(hi):
            return f">={lo:g}"
        return f"[{lo:g},{hi:g})"

    @property
    def labels(self) -> List[str]:
        return [self.label(k) for k in range(self.K)]

    @property
    def retained_bins(self) -> List[int]:
        return [k for k in range(self.K) if k not in self.reference_bins]

    def with_reference(self, reference_bins: Iterable[int]) -> "BinScheme":
        return BinScheme(self.lower, self.upper, self.width, self.edges, frozenset(int(k) for k in reference_bins))


def _default_reference(edges: Sequence[float]) -> FrozenSet[int]:
    lo, hi = REFERENCE_RANGE
    edge_arr = np.asarray(edges)
    has_lo = np.isclose(edge_arr, lo).any()
    has_hi = np.isclose(edge_arr, hi).any()
    if has_lo and has_hi:
        # bin k spans [edges[k-1], edges[k])
        return frozenset(
            k for k in range(1, len(edges))
            if edges[k - 1] >= lo - 1e-9 and edges[k] <= hi + 1e-9
        )
    return frozenset({int(np.searchsorted(edge_arr, REFERENCE_FALLBACK, side="right"))})


def make_bin_scheme(width: float = BIN_WIDTH, lower: float = BIN_LOWER, upper: float = BIN_UPPER) -> BinScheme:
    """Equal-width interior bins from ``lower``; the last interior bin ends exactly at ``upper``."""
    if not (width > 0) or not math.isfinite(width):
        raise InvalidWidth(f"bin width must be positive, got {width}")
    if not lower < upper:
        raise InvertedRange(f"lower ({lower}) must be below upper ({upper})")
    n_interior = max(1, int(math.floor((upper - lower) / width + 1e-9)))
    edges = [round(lower + i * width, _EDGE_DECIMALS) for i in range(n_interior)] + [float(upper)]
    edges_t = tuple(float(e) for e in edges)
    return BinScheme(float(lower), float(upper), float(width), edges_t, _default_reference(edges_t))


def make_custom_scheme(
    edges: Sequence[float],
    reference_bins: Optional[Iterable[int]] = None,
    reference_temp: Optional[float] = None,
) -> BinScheme:
    """Scheme from explicit ascending interior edges."""
    edges_t = tuple(float(e) for e in edges)
    if len(edges_t) < 2:
        raise InvalidWidth("at least two interior edges are required")
    if any(b <= a for a, b in zip(edges_t, edges_t[1:])):
        raise InvertedRange(f"edges must be strictly increasing: {edges_t}")
    if reference_bins is not None:
        reference = frozenset(int(k) for k in reference_bins)
    elif reference_temp is not None:
        reference = frozenset({int(np.searchsorted(np.asarray(edges_t), reference_temp, side="right"))})
    else:
        reference = _default_reference(edges_t)
    widths = np.diff(edges_t)
    width = float(widths[0]) if np.allclose(widths, widths[0]) else float("nan")
    return BinScheme(edges_t[0], edges_t[-1], width, edges_t, reference)


def replication_scheme() -> BinScheme:
    """Nine daily-mean bins of the fixed-effects replication, reference [10, 15.5)."""
    scheme = make_bin_scheme(REPLICATION_WIDTH, REPLICATION_LOWER, REPLICATION_UPPER)
    ref = int(np.searchsorted(np.asarray(scheme.edges), REPLICATION_REFERENCE, side="right"))
    return scheme.with_reference([ref])


def all_width_schemes(lower: float = BIN_LOWER, upper: float = BIN_UPPER) -> List[BinScheme]:
    return [make_bin_scheme(w, lower, upper) for w in ALL_WIDTHS]


def scheme_from_bounds(bounds: Sequence[Tuple[float, float]]) -> BinScheme:
    """Rebuild a scheme from (bin_lo, bin_hi) pairs, e.g. read back from an exposure CSV."""
    ordered = sorted(set((float(lo), float(hi)) for lo, hi in bounds), key=lambda b: b[0])
    edges = [hi for _lo, hi in ordered[:-1]]
    return make_custom_scheme(edges)


def assign_bin(temp_c, scheme: BinScheme):
    """Bin index for a temperature (scalar or array); interior bins are [a, b)."""
    idx = np.searchsorted(np.asarray(scheme.edges), temp_c, side="right")
    if np.ndim(idx) == 0:
        return int(idx)
    return idx


@dataclass(frozen=True)
class ExposureTable:
    """F[country, year, k]; rows ordered by (country, year)."""

    scheme: BinScheme
    keys: Tuple[Tuple[str, int], ...]
    values: np.ndarray  # (rows, K)
    hours_count: np.ndarray  # (rows,) H_t

    def row(self, country: str, year: int) -> np.ndarray:
        return self.values[self.keys.index((country, year))]

    def as_dict(self) -> Dict[Tuple[str, int, int], float]:
        out: Dict[Tuple[str, int, int], float] = {}
        for i, (country, year) in enumerate(self.keys):
            for k in range(self.scheme.K):
                out[(country, year, k)] = float(self.values[i, k])
        return out

    def to_frame(self) -> pd.DataFrame:
        K = self.scheme.K
        bounds = [self.scheme.bounds(k) for k in range(K)]
        rows = len(self.keys)
        return pd.DataFrame({
            "country": np.repeat([c for c, _ in self.keys], K),
            "year": np.repeat([y for _, y in self.keys], K).astype(int),
            "bin_lo": np.tile([b[0] for b in bounds], rows),
            "bin_hi": np.tile([b[1] for b in bounds], rows),
            "fraction": self.values.reshape(-1),
        })

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, scheme: Optional[BinScheme] = None) -> "ExposureTable":
        bounds = list(zip(frame["bin_lo"].astype(float), frame["bin_hi"].astype(float)))
        if scheme is None:
            scheme = scheme_from_bounds(bounds)
        frame = frame.assign(
            k=[assign_bin(lo if math.isfinite(lo) else hi - 1.0, scheme) for lo, hi in bounds]
        )
        wide = frame.pivot_table(index=["country", "year"], columns="k", values="fraction", aggfunc="first")
        wide = wide.reindex(columns=range(scheme.K)).fillna(0.0).sort_index()
        keys = tuple((str(c), int(y)) for c, y in wide.index)
        return cls(scheme, keys, wide.to_numpy(dtype=float), np.full(len(keys), -1, dtype=np.int64))


DayCountTable = ExposureTable  # same layout; values are day counts


def parse_day_window(text: str) -> Tuple[int, int]:
    start, end = (int(x) for x in text.split(":"))
    return start, end


def _retained(hours: np.ndarray, window: Tuple[int, int]) -> np.ndarray:
    start, end = window
    if start <= end:
        return (hours >= start) & (hours < end)
    return (hours >= start) | (hours < end)


def country_utc_offsets(tg: TemperatureGrid, cm: CountryMap) -> Dict[str, int]:
    """Whole-hour solar offset per country from the mean longitude of its cells (half rounds up)."""
    lon = tg.cell_meta["lon"].reindex(cm.assignment.index)
    frame = pd.DataFrame({"country": cm.assignment.to_numpy(), "lon": lon.to_numpy()}).dropna()
    means = frame.groupby("country")["lon"].mean()
    return {str(c): int(math.floor(m / 15.0 + 0.5)) for c, m in means.items()}


def _partitions(tg: TemperatureGrid, pg: PopulationGrid, cm: CountryMap) -> List[Tuple[str, int, pd.DataFrame, pd.Series]]:
    """(country, year, records, population by cell) for every covered country-year."""
    records = tg.records.merge(cm.assignment.rename("country").reset_index(), on="cell_id", how="inner")
    records = records.assign(year=records["timestamp"].dt.year.astype(int))
    pop = pg.counts.set_index(["cell_id", "year"])["population"]
    parts = []
    for (country, year), sub in records.groupby(["country", "year"], sort=True):
        cells = np.sort(sub["cell_id"].unique())
        idx = pd.MultiIndex.from_arrays([cells, np.full(len(cells), year)])
        p = pd.Series(pop.reindex(idx).fillna(0.0).to_numpy(), index=cells)
        parts.append((str(country), int(year), sub, p))
    return parts


def _weights(country: str, year: int, pop: pd.Series) -> pd.Series:
    total = math.fsum(pop.to_numpy())
    if not total > 0:
        raise ZeroPopulation(f"country {country} has zero total population in {year}")
    return pop / total


def _run_partitions(fn: Callable, parts: list, threads: int) -> list:
    if threads > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, parts))
    return [fn(p) for p in parts]


def _slot_fractions(temps: pd.DataFrame, w: pd.Series, scheme: BinScheme) -> np.ndarray:
    """f[h, k] for a (slots x cells) temperature pivot; missing cells renormalize the slot."""
    T = temps.to_numpy()
    weights = w.reindex(temps.columns).to_numpy()
    present = ~np.isnan(T)
    W = np.where(present, weights[None, :], 0.0)
    B = np.where(present, assign_bin(np.where(present, T, 0.0), scheme), 0)
    H, K = T.shape[0], scheme.K
    flat = (np.arange(H)[:, None] * K + B).reshape(-1)
    f = np.bincount(flat, weights=W.reshape(-1), minlength=H * K).reshape(H, K)
    mass = W.sum(axis=1)
    keep = mass > 0
    return f[keep] / mass[keep, None]


def _column_fsum(f: np.ndarray) -> np.ndarray:
    return np.array([math.fsum(f[:, k]) for k in range(f.shape[1])])


def compute_exposure(
    tg: TemperatureGrid,
    pg: PopulationGrid,
    cm: CountryMap,
    scheme: BinScheme,
    day_window: Tuple[int, int] = (6, 21),
    threads: int = THREADS,
) -> ExposureTable:
    """Population-weighted share of each country's population per bin, averaged over daytime slots."""
    offsets = country_utc_offsets(tg, cm)

    def one(part):
        country, year, sub, pop = part
        w = _weights(country, year, pop)
        local = (sub["timestamp"].dt.hour.to_numpy() + offsets.get(country, 0)) % 24
        kept = sub[_retained(local, day_window)]
        if kept.empty:
            raise NoRetainedHours(f"no retained time slots for {country} in {year} with window {day_window}")
        temps = kept.pivot(index="timestamp", columns="cell_id", values="temp_c").sort_index()
        f = _slot_fractions(temps, w, scheme)
        H = f.shape[0]
        if H == 0:
            raise NoRetainedHours(f"no populated time slots for {country} in {year}")
        return (country, year), _column_fsum(f) / H, H

    results = _run_partitions(one, _partitions(tg, pg, cm), threads)
    keys = tuple(r[0] for r in results)
    values = np.vstack([r[1] for r in results]) if results else np.zeros((0, scheme.K))
    hours = np.array([r[2] for r in results], dtype=np.int64)
    logger.info("Computed exposure for %d country-years over %d bins", len(keys), scheme.K)
    return ExposureTable(scheme, keys, values, hours)


def compute_day_counts(
    tg: TemperatureGrid,
    pg: PopulationGrid,
    cm: CountryMap,
    scheme: BinScheme,
    threads: int = THREADS,
) -> DayCountTable:
    """Number of UTC days per bin of the population-weighted daily mean temperature."""

    def one(part):
        country, year, sub, pop = part
        w = _weights(country, year, pop)
        daily = (
            sub.assign(day=sub["timestamp"].dt.normalize())
            .groupby(["day", "cell_id"], sort=True)["temp_c"].mean()
            .unstack("cell_id")
            .sort_index()
        )
        T = daily.to_numpy()
        weights = w.reindex(daily.columns).to_numpy()
        present = ~np.isnan(T)
        Wd = np.where(present, weights[None, :], 0.0)
        mass = Wd.sum(axis=1)
        keep = mass > 0
        means = (np.where(present, T, 0.0) * Wd).sum(axis=1)[keep] / mass[keep]
        counts = np.bincount(assign_bin(means, scheme), minlength=scheme.K).astype(float)
        return (country, year), counts, int(keep.sum())

    results = _run_partitions(one, _partitions(tg, pg, cm), threads)
    keys = tuple(r[0] for r in results)
    values = np.vstack([r[1] for r in results]) if results else np.zeros((0, scheme.K))
    days = np.array([r[2] for r in results], dtype=np.int64)
    logger.info("Computed day counts for %d country-years", len(keys))
    return DayCountTable(scheme, keys, values, days)


def band_labels(bands: Sequence[float]) -> List[str]:
    bands = sorted(float(b) for b in bands)
    labels = [f"<{bands[0]:g}"]
    labels += [f"[{a:g},{b:g})" for a, b in zip(bands, bands[1:])]
    labels.append(f">={bands[-1]:g}")
    return labels


def climate_census(
    tg: TemperatureGrid,
    pg: PopulationGrid,
    cm: CountryMap,
    year: int,
    bands: Sequence[float],
) -> Dict[str, float]:
    """Population living in cells whose annual mean temperature falls in each band."""
    if year not in tg.years or year not in set(pg.counts["year"].tolist()):
        raise YearNotCovered(f"year {year} is not covered by both grids")
    thresholds = np.asarray(sorted(float(b) for b in bands))
    labels = band_labels(thresholds)
    records = tg.records[tg.records["timestamp"].dt.year == year]
    records = records[records["cell_id"].isin(cm.assignment.index)]
    means = records.groupby("cell_id", sort=True)["temp_c"].mean()
    pop = pg.for_year(year).reindex(means.index).fillna(0.0)
    band = np.searchsorted(thresholds, means.to_numpy(), side="right")
    totals: Dict[str, float] = {}
    for b, label in enumerate(labels):
        totals[label] = math.fsum(pop.to_numpy()[band == b])
    return totals
