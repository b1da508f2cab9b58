"""Tests for panel assembly and design matrices."""
import dataclasses
import math

import numpy as np
import pandas as pd
import pytest

from thermopool.core.errors import EmptyPanel, MalformedRow, NonPositiveValue, RankWarning, ValidationError
from thermopool.core.exposure import make_bin_scheme
from thermopool.core.panel import (
    assemble_panel,
    build_design,
    load_series,
    panel_from_frame,
    panel_to_frame,
)


@pytest.fixture(scope="module")
def panel(small_sim):
    return assemble_panel(small_sim.energy, small_sim.gdp, small_sim.price, small_sim.exposure)


class TestLoadSeries:
    def test_reads_csv(self, tmp_path):
        path = tmp_path / "e.csv"
        path.write_text("country,year,value\nAAA,2001,2.0\nAAA,2000,1.0\n")
        series = load_series(path, "energy")
        assert series.index.tolist() == [("AAA", 2000), ("AAA", 2001)]
        assert series.name == "energy"

    def test_blank_values_are_missing(self, tmp_path):
        path = tmp_path / "e.csv"
        path.write_text("country,year,value\nAAA,2000,\nAAA,2001,2.0\n")
        assert load_series(path, "energy").index.tolist() == [("AAA", 2001)]

    @pytest.mark.parametrize("value", [0.0, -3.0])
    def test_non_positive(self, value):
        frame = pd.DataFrame({"country": ["AAA"], "year": [2000], "value": [value]})
        with pytest.raises(NonPositiveValue, match="AAA 2000"):
            load_series(frame, "gdp")

    def test_duplicate_key(self):
        frame = pd.DataFrame({"country": ["AAA", "AAA"], "year": [2000, 2000], "value": [1.0, 2.0]})
        with pytest.raises(MalformedRow, match="duplicate"):
            load_series(frame, "gdp")

    def test_missing_columns(self):
        with pytest.raises(MalformedRow, match="missing columns"):
            load_series(pd.DataFrame({"country": ["AAA"], "value": [1.0]}), "gdp")


class TestAssemblePanel:
    def test_rows_and_drop_reasons(self, panel, small_sim):
        n_countries = small_sim.config.n_countries
        assert panel.N == n_countries
        assert len(panel.frame) == n_countries * small_sim.config.n_years
        # the seed year before the panel has no lag, GDP, lagged price or exposure
        assert panel.dropped == {
            "missing_demand_lag": n_countries,
            "missing_gdp": n_countries,
            "missing_price_lag": n_countries,
            "missing_exposure": n_countries,
        }

    def test_lags_come_from_previous_year(self, panel, small_sim):
        energy = small_sim.energy.set_index(["country", "year"])["value"]
        price = small_sim.price.set_index(["country", "year"])["value"]
        row = panel.frame[(panel.frame["country"] == "C01") & (panel.frame["year"] == 2002)].iloc[0]
        assert row["log_y"] == pytest.approx(math.log(energy[("C01", 2002)]))
        assert row["log_y_lag1"] == pytest.approx(math.log(energy[("C01", 2001)]))
        assert row["log_price_lag1"] == pytest.approx(math.log(price[("C01", 2001)]))

    def test_missing_gdp_row_is_dropped(self, small_sim):
        gdp = small_sim.gdp[~((small_sim.gdp["country"] == "C00") & (small_sim.gdp["year"] == 2003))]
        panel = assemble_panel(small_sim.energy, gdp, small_sim.price, small_sim.exposure)
        assert panel.dropped["missing_gdp"] == small_sim.config.n_countries + 1
        assert panel.T_i["C00"] == small_sim.config.n_years - 1

    def test_no_overlap_is_empty(self, small_sim):
        energy = small_sim.energy.assign(year=small_sim.energy["year"] + 100)
        with pytest.raises(EmptyPanel):
            assemble_panel(energy, small_sim.gdp, small_sim.price, small_sim.exposure)

    def test_between_restricts_years(self, panel):
        sub = panel.between(2001, 2002)
        assert sub.years == [2001, 2002]
        assert sub.exposure.shape[0] == len(sub.frame)
        with pytest.raises(EmptyPanel):
            panel.between(1900, 1901)


class TestBuildDesign:
    def test_reference_bins_removed_and_covariates_centered(self, panel):
        design = build_design(panel)
        assert design.K_eff == 10
        assert "[16,19.5)" not in design.exposure_labels
        assert design.column_labels[0] == "log_y_lag1"
        np.testing.assert_allclose(design.X.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(design.F.sum(axis=1) + design.reference_fraction, 1.0, atol=1e-12)
        assert design.N == panel.N and design.n == len(panel.frame)

    def test_scheme_mismatch(self, panel):
        with pytest.raises(ValidationError, match="bins"):
            build_design(panel, make_bin_scheme(1.0))

    def test_constant_column_warns(self, panel):
        exposure = panel.exposure.copy()
        exposure[:, 0] = 0.0
        with pytest.warns(RankWarning, match="constant across the panel"):
            build_design(dataclasses.replace(panel, exposure=exposure))

    def test_constant_nonzero_within_country_warns(self, panel):
        exposure = panel.exposure.copy()
        rng = np.random.default_rng(0)
        exposure[:, 1] = rng.uniform(0.1, 0.2, size=len(exposure))
        exposure[(panel.frame["country"] == "C00").to_numpy(), 1] = 0.5
        with pytest.warns(RankWarning, match="within C00"):
            build_design(dataclasses.replace(panel, exposure=exposure))

    def test_design_table_rebuilds_the_same_design(self, panel):
        frame = panel_to_frame(panel)
        back = panel_from_frame(frame, sorted(panel.scheme.reference_bins))
        a, b = build_design(panel), build_design(back)
        assert a.exposure_labels == b.exposure_labels
        np.testing.assert_array_equal(a.F, b.F)
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.group, b.group)
