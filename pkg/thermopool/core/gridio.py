"""Gridded input loading and validation.

Three CSV files describe the gridded inputs:

- temperature: ``cell_id,timestamp,temp_c`` (UTC ISO-8601, 3-hour resolution)
- population:  ``cell_id,year,population``
- mapping:     ``cell_id,country[,lat,lon]``

Loaded containers are frozen and hold sorted pandas frames; they are safe to
share across threads once built.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel

from .config import TEMP_MAX, TEMP_MIN
from .errors import AlignmentError, DuplicateRecord, MalformedRow, OutOfRangeTemperature

logger = logging.getLogger(__name__)

TEMPERATURE_FILE = "temperature.csv"
POPULATION_FILE = "population.csv"
MAPPING_FILE = "mapping.csv"
TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%SZ"


class ColumnSchema(BaseModel):
    """Column names of the temperature file, mapped onto the canonical names."""

    cell_id: str = "cell_id"
    timestamp: str = "timestamp"
    temp_c: str = "temp_c"


@dataclass(frozen=True)
class TemperatureGrid:
    records: pd.DataFrame  # cell_id (int64), timestamp (datetime64, UTC naive), temp_c
    cell_meta: pd.DataFrame  # indexed by cell_id: lat, lon

    @property
    def years(self) -> List[int]:
        return sorted(int(y) for y in self.records["timestamp"].dt.year.unique())

    @property
    def cells(self) -> np.ndarray:
        return np.sort(self.records["cell_id"].unique())

    def shifted(self, delta_t: float) -> "TemperatureGrid":
        """Copy with every temperature moved by ``delta_t`` degrees."""
        if delta_t == 0:
            return self
        records = self.records.copy()
        records["temp_c"] = records["temp_c"] + float(delta_t)
        return TemperatureGrid(records=records, cell_meta=self.cell_meta)


@dataclass(frozen=True)
class PopulationGrid:
    counts: pd.DataFrame  # cell_id, year, population

    def for_year(self, year: int) -> pd.Series:
        sub = self.counts[self.counts["year"] == year]
        return pd.Series(sub["population"].to_numpy(), index=sub["cell_id"].to_numpy())


@dataclass(frozen=True)
class CountryMap:
    assignment: pd.Series  # cell_id -> country code

    @property
    def countries(self) -> List[str]:
        return sorted(self.assignment.unique())

    def cells_of(self, country: str) -> np.ndarray:
        return np.sort(self.assignment.index[self.assignment == country].to_numpy())


@dataclass(frozen=True)
class AlignmentEntry:
    severity: str  # "warning" | "fatal"
    code: str
    message: str
    cell_id: Optional[int] = None
    country: Optional[str] = None
    year: Optional[int] = None


@dataclass(frozen=True)
class AlignmentReport:
    entries: Tuple[AlignmentEntry, ...] = field(default_factory=tuple)

    @property
    def fatal(self) -> List[AlignmentEntry]:
        return [e for e in self.entries if e.severity == "fatal"]

    @property
    def warnings(self) -> List[AlignmentEntry]:
        return [e for e in self.entries if e.severity == "warning"]

    def __len__(self) -> int:
        return len(self.entries)

    def raise_if_fatal(self) -> None:
        if self.fatal:
            raise AlignmentError(
                "Alignment check failed:\n" + "\n".join(f"- {e.message}" for e in self.fatal)
            )


def _read_raw(path: str | Path, required: List[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise MalformedRow(f"{path}: missing columns {missing}")
    return frame


def _first_bad(mask: np.ndarray) -> int:
    """1-based file line of the first flagged data row (header is line 1)."""
    return int(np.flatnonzero(mask)[0]) + 2


def _parse_numeric(frame: pd.DataFrame, column: str, path: Path) -> np.ndarray:
    values = pd.to_numeric(frame[column].str.strip(), errors="coerce").to_numpy(dtype=float)
    bad = np.isnan(values)
    if bad.any():
        line = _first_bad(bad)
        raise MalformedRow(f"{path}:{line}: cannot parse {column}={frame[column].iloc[line - 2]!r}")
    return values


def _parse_int(frame: pd.DataFrame, column: str, path: Path) -> np.ndarray:
    values = _parse_numeric(frame, column, path)
    bad = ~np.isfinite(values) | (values != np.round(values))
    if bad.any():
        line = _first_bad(bad)
        raise MalformedRow(f"{path}:{line}: {column} must be an integer")
    return values.astype(np.int64)


def load_temperature_grid(
    path: str | Path,
    schema: Optional[ColumnSchema] = None,
    cell_meta: Optional[pd.DataFrame] = None,
) -> TemperatureGrid:
    """Load and validate a 3-hourly temperature file.

    ``cell_meta`` (indexed by cell_id with ``lat``/``lon``) usually comes from
    the mapping file; when absent, ``lat``/``lon`` columns of the temperature
    file are used, and failing that every cell is placed on the prime meridian.
    """
    schema = schema or ColumnSchema()
    path = Path(path)
    raw = _read_raw(path, [schema.cell_id, schema.timestamp, schema.temp_c])

    cell_ids = _parse_int(raw, schema.cell_id, path)
    stamps = pd.to_datetime(raw[schema.timestamp].str.strip(), utc=True, errors="coerce", format="ISO8601")
    bad_ts = stamps.isna().to_numpy()
    if bad_ts.any():
        line = _first_bad(bad_ts)
        raise MalformedRow(f"{path}:{line}: cannot parse timestamp {raw[schema.timestamp].iloc[line - 2]!r}")
    stamps = stamps.dt.tz_convert("UTC").dt.tz_localize(None)
    misaligned = (
        (stamps.dt.hour % 3 != 0) | (stamps.dt.minute != 0) | (stamps.dt.second != 0)
        | (stamps.dt.microsecond != 0)
    ).to_numpy()
    if misaligned.any():
        line = _first_bad(misaligned)
        raise MalformedRow(f"{path}:{line}: timestamp not on a 3-hour boundary")

    temps = _parse_numeric(raw, schema.temp_c, path)
    out_of_range = ~np.isfinite(temps) | (temps < TEMP_MIN) | (temps > TEMP_MAX)
    if out_of_range.any():
        line = _first_bad(out_of_range)
        raise OutOfRangeTemperature(
            f"{path}:{line}: temp_c={temps[line - 2]} outside [{TEMP_MIN}, {TEMP_MAX}]"
        )

    records = pd.DataFrame({"cell_id": cell_ids, "timestamp": stamps.to_numpy(), "temp_c": temps})
    dup = records.duplicated(subset=["cell_id", "timestamp"], keep="first").to_numpy()
    if dup.any():
        line = _first_bad(dup)
        raise DuplicateRecord(
            f"{path}:{line}: duplicate record for cell {cell_ids[line - 2]} at {stamps.iloc[line - 2]}"
        )

    if cell_meta is None:
        if {"lat", "lon"}.issubset(raw.columns):
            meta = pd.DataFrame({
                "cell_id": cell_ids,
                "lat": _parse_numeric(raw, "lat", path),
                "lon": _parse_numeric(raw, "lon", path),
            }).drop_duplicates("cell_id").set_index("cell_id").sort_index()
        else:
            logger.warning("%s: no cell coordinates available; assuming lon=0 for all cells", path)
            unique = np.unique(cell_ids)
            meta = pd.DataFrame({"lat": 0.0, "lon": 0.0}, index=pd.Index(unique, name="cell_id"))
    else:
        meta = cell_meta
    unknown = np.setdiff1d(np.unique(cell_ids), meta.index.to_numpy())
    if unknown.size:
        raise MalformedRow(f"{path}: cells without coordinates: {unknown[:10].tolist()}")

    records = records.sort_values(["cell_id", "timestamp"], kind="mergesort").reset_index(drop=True)
    logger.info("Loaded %d temperature records for %d cells from %s",
                len(records), records["cell_id"].nunique(), path)
    return TemperatureGrid(records=records, cell_meta=meta)


def load_population_grid(path: str | Path) -> PopulationGrid:
    path = Path(path)
    raw = _read_raw(path, ["cell_id", "year", "population"])
    counts = pd.DataFrame({
        "cell_id": _parse_int(raw, "cell_id", path),
        "year": _parse_int(raw, "year", path),
        "population": _parse_numeric(raw, "population", path),
    })
    bad = ~np.isfinite(counts["population"].to_numpy()) | (counts["population"].to_numpy() < 0)
    if bad.any():
        raise MalformedRow(f"{path}:{_first_bad(bad)}: population must be a non-negative number")
    dup = counts.duplicated(subset=["cell_id", "year"]).to_numpy()
    if dup.any():
        raise DuplicateRecord(f"{path}:{_first_bad(dup)}: duplicate (cell_id, year)")
    counts = counts.sort_values(["cell_id", "year"], kind="mergesort").reset_index(drop=True)
    logger.info("Loaded %d population counts from %s", len(counts), path)
    return PopulationGrid(counts=counts)


def load_country_map(path: str | Path) -> Tuple[CountryMap, Optional[pd.DataFrame]]:
    """Load the cell-to-country mapping; returns the map and cell coordinates when present."""
    path = Path(path)
    raw = _read_raw(path, ["cell_id", "country"])
    cell_ids = _parse_int(raw, "cell_id", path)
    countries = raw["country"].str.strip().to_numpy()
    empty = countries == ""
    if empty.any():
        raise MalformedRow(f"{path}:{_first_bad(empty)}: empty country code")
    dup = pd.Series(cell_ids).duplicated().to_numpy()
    if dup.any():
        raise DuplicateRecord(f"{path}:{_first_bad(dup)}: cell mapped twice")
    assignment = pd.Series(countries, index=pd.Index(cell_ids, name="cell_id"), name="country").sort_index()
    meta = None
    if {"lat", "lon"}.issubset(raw.columns):
        meta = pd.DataFrame(
            {"lat": _parse_numeric(raw, "lat", path), "lon": _parse_numeric(raw, "lon", path)},
            index=pd.Index(cell_ids, name="cell_id"),
        ).sort_index()
    return CountryMap(assignment=assignment), meta


def load_grid_dir(grid_dir: str | Path) -> Tuple[TemperatureGrid, PopulationGrid, CountryMap]:
    """Load the temperature, population and mapping files from one directory."""
    grid_dir = Path(grid_dir)
    cm, meta = load_country_map(grid_dir / MAPPING_FILE)
    tg = load_temperature_grid(grid_dir / TEMPERATURE_FILE, cell_meta=meta)
    pg = load_population_grid(grid_dir / POPULATION_FILE)
    return tg, pg, cm


def temperature_frame(tg: TemperatureGrid) -> pd.DataFrame:
    """Inverse of the loader: rows as they appear in a temperature file."""
    return pd.DataFrame({
        "cell_id": tg.records["cell_id"].to_numpy(),
        "timestamp": tg.records["timestamp"].dt.strftime(TIMESTAMP_FORMAT).to_numpy(),
        "temp_c": tg.records["temp_c"].to_numpy(),
    })


def validate_alignment(tg: TemperatureGrid, pg: PopulationGrid, cm: CountryMap) -> AlignmentReport:
    """Cross-check the three inputs; fatal entries block exposure construction."""
    entries: List[AlignmentEntry] = []
    temp_cells = tg.cells
    mapped = cm.assignment

    unmapped = np.setdiff1d(temp_cells, mapped.index.to_numpy())
    for cell in unmapped:
        entries.append(AlignmentEntry(
            "fatal", "unmapped_cell", f"cell {int(cell)} has temperature records but no country",
            cell_id=int(cell),
        ))

    years = tg.years
    pop = pg.counts
    pop_keys = set(zip(pop["cell_id"].to_numpy().tolist(), pop["year"].to_numpy().tolist()))
    cell_years = tg.records.assign(year=tg.records["timestamp"].dt.year)[["cell_id", "year"]].drop_duplicates()
    for cell, year in sorted(zip(cell_years["cell_id"].tolist(), cell_years["year"].tolist())):
        if (cell, year) not in pop_keys:
            entries.append(AlignmentEntry(
                "warning", "missing_population", f"cell {cell} has no population count for {year}",
                cell_id=int(cell), year=int(year),
            ))

    with_country = pop.merge(
        mapped.rename("country").reset_index(), on="cell_id", how="inner"
    )
    totals = with_country.groupby(["country", "year"])["population"].sum()
    temp_countries = sorted(set(mapped.reindex(temp_cells).dropna()))
    for country in temp_countries:
        for year in years:
            total = float(totals.get((country, year), 0.0))
            if total <= 0.0:
                entries.append(AlignmentEntry(
                    "fatal", "zero_population",
                    f"country {country} has zero total population in {year}; weights undefined",
                    country=country, year=year,
                ))

    pop_years = sorted(int(y) for y in pop["year"].unique())
    covered = set(years)
    for year in pop_years:
        if year not in covered:
            entries.append(AlignmentEntry(
                "warning", "missing_temperature_year", f"year {year} has population but no temperature records",
                year=year,
            ))

    per_stamp = tg.records.groupby("timestamp")["cell_id"].nunique()
    incomplete = per_stamp[per_stamp < len(temp_cells)]
    if len(incomplete):
        entries.append(AlignmentEntry(
            "warning", "incomplete_timestamps",
            f"{len(incomplete)} timestamps lack records for some cells; affected slots are renormalized",
        ))

    report = AlignmentReport(entries=tuple(entries))
    for entry in report.entries:
        log = logger.error if entry.severity == "fatal" else logger.warning
        log("alignment %s: %s", entry.code, entry.message)
    return report
