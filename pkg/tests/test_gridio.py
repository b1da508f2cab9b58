"""Tests for gridded input loading and alignment checks."""
import numpy as np
import pandas as pd
import pytest

from thermopool.core.errors import AlignmentError, DuplicateRecord, MalformedRow, OutOfRangeTemperature
from thermopool.core.gridio import (
    CountryMap,
    load_country_map,
    load_grid_dir,
    load_population_grid,
    load_temperature_grid,
    validate_alignment,
)
from thermopool.core.simulate import SimulationConfig, simulate

TEMPS = """cell_id,timestamp,temp_c
2,2001-01-01T03:00:00Z,4.5
1,2001-01-01T00:00:00Z,-1.0
1,2001-01-01T03:00:00Z,0.5
2,2001-01-01T00:00:00Z,3.0
"""

POP = """cell_id,year,population
1,2001,100
2,2001,300
"""

MAP = """cell_id,country,lat,lon
1,AAA,10.0,14.0
2,AAA,11.0,16.0
"""


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


@pytest.fixture
def grid_dir(tmp_path):
    _write(tmp_path, "temperature.csv", TEMPS)
    _write(tmp_path, "population.csv", POP)
    _write(tmp_path, "mapping.csv", MAP)
    return tmp_path


class TestTemperatureLoader:
    def test_records_sorted_by_cell_and_time(self, tmp_path):
        tg = load_temperature_grid(_write(tmp_path, "t.csv", TEMPS))
        assert tg.records["cell_id"].tolist() == [1, 1, 2, 2]
        assert tg.records["temp_c"].tolist() == [-1.0, 0.5, 3.0, 4.5]
        assert tg.years == [2001]

    def test_without_coordinates_cells_sit_on_prime_meridian(self, tmp_path):
        tg = load_temperature_grid(_write(tmp_path, "t.csv", TEMPS))
        assert (tg.cell_meta["lon"] == 0.0).all()

    def test_unparseable_timestamp_reports_line(self, tmp_path):
        bad = TEMPS.replace("2001-01-01T03:00:00Z,0.5", "yesterday,0.5")
        with pytest.raises(MalformedRow, match=r":4:"):
            load_temperature_grid(_write(tmp_path, "t.csv", bad))

    def test_timestamp_off_three_hour_grid(self, tmp_path):
        bad = TEMPS.replace("2001-01-01T03:00:00Z,4.5", "2001-01-01T04:00:00Z,4.5")
        with pytest.raises(MalformedRow, match="3-hour"):
            load_temperature_grid(_write(tmp_path, "t.csv", bad))

    def test_unparseable_temperature(self, tmp_path):
        bad = TEMPS.replace("-1.0", "cold")
        with pytest.raises(MalformedRow, match=r":3:"):
            load_temperature_grid(_write(tmp_path, "t.csv", bad))

    @pytest.mark.parametrize("value", ["75.0", "-120"])
    def test_out_of_range_temperature(self, tmp_path, value):
        bad = TEMPS.replace("4.5", value)
        with pytest.raises(OutOfRangeTemperature):
            load_temperature_grid(_write(tmp_path, "t.csv", bad))

    def test_duplicate_cell_timestamp(self, tmp_path):
        bad = TEMPS + "1,2001-01-01T00:00:00Z,7.0\n"
        with pytest.raises(DuplicateRecord, match=r":6:"):
            load_temperature_grid(_write(tmp_path, "t.csv", bad))

    def test_missing_column(self, tmp_path):
        with pytest.raises(MalformedRow, match="missing columns"):
            load_temperature_grid(_write(tmp_path, "t.csv", "cell_id,timestamp\n1,2001-01-01T00:00:00Z\n"))

    def test_shift_moves_every_temperature(self, tmp_path):
        tg = load_temperature_grid(_write(tmp_path, "t.csv", TEMPS))
        assert tg.shifted(0.0) is tg
        warm = tg.shifted(1.5)
        np.testing.assert_allclose(warm.records["temp_c"], tg.records["temp_c"] + 1.5)


class TestPopulationAndMapping:
    def test_negative_population(self, tmp_path):
        with pytest.raises(MalformedRow, match="non-negative"):
            load_population_grid(_write(tmp_path, "p.csv", POP.replace("300", "-3")))

    def test_duplicate_population_row(self, tmp_path):
        with pytest.raises(DuplicateRecord):
            load_population_grid(_write(tmp_path, "p.csv", POP + "1,2001,5\n"))

    def test_mapping_with_coordinates(self, tmp_path):
        cm, meta = load_country_map(_write(tmp_path, "m.csv", MAP))
        assert cm.countries == ["AAA"]
        assert cm.cells_of("AAA").tolist() == [1, 2]
        assert meta.loc[2, "lon"] == 16.0

    def test_cell_mapped_twice(self, tmp_path):
        with pytest.raises(DuplicateRecord):
            load_country_map(_write(tmp_path, "m.csv", MAP + "1,BBB,0,0\n"))

    def test_empty_country_code(self, tmp_path):
        with pytest.raises(MalformedRow, match="empty country"):
            load_country_map(_write(tmp_path, "m.csv", MAP.replace("2,AAA", "2, ")))


class TestAlignment:
    def test_clean_inputs_have_no_fatal_entries(self, grid_dir):
        tg, pg, cm = load_grid_dir(grid_dir)
        report = validate_alignment(tg, pg, cm)
        assert report.fatal == []
        report.raise_if_fatal()

    def test_unmapped_cell_is_fatal(self, grid_dir):
        tg, pg, _ = load_grid_dir(grid_dir)
        cm = CountryMap(assignment=pd.Series(["AAA"], index=pd.Index([1], name="cell_id"), name="country"))
        report = validate_alignment(tg, pg, cm)
        assert [e.code for e in report.fatal] == ["unmapped_cell"]
        with pytest.raises(AlignmentError):
            report.raise_if_fatal()

    def test_zero_population_country_is_fatal(self, grid_dir):
        _write(grid_dir, "population.csv", "cell_id,year,population\n1,2001,0\n2,2001,0\n")
        report = validate_alignment(*load_grid_dir(grid_dir))
        assert any(e.code == "zero_population" and e.country == "AAA" for e in report.fatal)

    def test_missing_population_is_a_warning(self, grid_dir):
        _write(grid_dir, "population.csv", "cell_id,year,population\n1,2001,10\n")
        report = validate_alignment(*load_grid_dir(grid_dir))
        assert report.fatal == []
        assert [e.cell_id for e in report.warnings if e.code == "missing_population"] == [2]


class TestSimulatedGrid:
    def test_written_grid_reads_back_identically(self, small_sim, small_sim_dir):
        tg, pg, cm = load_grid_dir(small_sim_dir / "grid")
        pd.testing.assert_frame_equal(tg.records, small_sim.temperature.records, check_dtype=False)
        assert cm.countries == small_sim.country_map.countries
        assert validate_alignment(tg, pg, cm).fatal == []

    def test_every_day_of_the_year_stays_in_its_year(self):
        config = SimulationConfig(n_countries=2, n_years=2, cells_per_country=1, days_per_year=365, seed=1)
        sim = simulate(config)
        stamps = sim.temperature.records["timestamp"]
        assert sorted(stamps.dt.year.unique()) == [2000, 2001]
        assert stamps.dt.normalize().nunique() == 2 * 365
        assert sorted({year for _, year in sim.exposure.keys}) == [2000, 2001]
        np.testing.assert_allclose(sim.exposure.values.sum(axis=1), 1.0, atol=1e-12)
