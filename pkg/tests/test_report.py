"""Tests for posterior summaries, Koyck arithmetic, counterfactuals and refits."""
import math

import numpy as np
import pandas as pd
import pytest

from thermopool.core.errors import EmptyDraws, NonStationary, ValidationError, WindowTooWide, YearNotCovered
from thermopool.core.exposure import compute_exposure
from thermopool.core.inference import ModelSpec, Variant, constrained_labels, sample_prior
from thermopool.core.panel import assemble_panel
from thermopool.core.report import (
    SUMMARY_COLUMNS,
    elasticity_table,
    group_effects_table,
    koyck_long_run,
    koyck_table,
    model_spec,
    prior_sensitivity,
    rolling_windows,
    summarize,
    warming_counterfactual,
    windows_frame,
)
from thermopool.core import report
from thermopool.core.sampler import PosteriorDraws, SamplerConfig, run_chains

COEFS = ["alpha", "nu", "beta[<-5]", "beta[>=30]", "gamma[log_gdp]", "gamma[log_price_lag1]", "sigma_e"]


def point_draws(values, n_chains=2, n_draws=10):
    """Draws that sit on one parameter vector."""
    row = np.array([values[label] for label in COEFS], dtype=float)
    return PosteriorDraws(np.tile(row, (n_chains, n_draws, 1)), {}, list(COEFS))


def fitted_draws(design, variant, values=None, n_draws=40, seed=0):
    """Prior draws dressed up as a fit, optionally with some parameters pinned."""
    spec = ModelSpec.from_design(design, variant)
    labels = constrained_labels(spec, design)
    rows = sample_prior(spec, 2 * n_draws, np.random.default_rng(seed))
    for label, value in (values or {}).items():
        rows[:, labels.index(label)] = value
    return PosteriorDraws(rows.reshape(2, n_draws, -1), {}, labels, {"spec": spec.model_dump(mode="json")}), spec


class TestKoyck:
    def test_known_multipliers(self):
        assert koyck_long_run(0.21, 0.96) * 0.10 == pytest.approx(0.525)
        assert koyck_long_run(1.94, 0.83) * 0.10 == pytest.approx(1.141, abs=0.002)

    def test_linear_in_effect(self):
        assert koyck_long_run(0.6, 0.4) == pytest.approx(3 * koyck_long_run(0.2, 0.4))

    @pytest.mark.parametrize("nu", [1.0, -1.0, 1.3])
    def test_non_stationary(self, nu):
        with pytest.raises(NonStationary):
            koyck_long_run(0.1, nu)

    def test_table_scales_by_shift(self):
        values = dict.fromkeys(COEFS, 0.0)
        values.update({"nu": 0.96, "beta[<-5]": 0.21, "sigma_e": 0.1})
        table = koyck_table(point_draws(values), shift=0.10).set_index(["parameter", "horizon"])
        assert table.loc[("beta[<-5]", "short_run"), "mean"] == pytest.approx(2.1)
        assert table.loc[("beta[<-5]", "long_run"), "mean"] == pytest.approx(52.5)
        assert table.loc[("beta[<-5]", "long_run_exact"), "mean"] == pytest.approx(math.expm1(0.525) * 100)
        assert (table["excluded"] == 0).all()

    def test_non_stationary_draws_are_excluded(self):
        values = dict.fromkeys(COEFS, 0.1)
        draws = point_draws(values)
        draws.draws[0, :3, COEFS.index("nu")] = 1.2
        table = koyck_table(draws)
        assert (table["excluded"] == 3).all()
        draws.draws[:, :, COEFS.index("nu")] = 1.0
        with pytest.raises(NonStationary):
            koyck_table(draws)


class TestElasticities:
    @pytest.mark.parametrize("gdp,price,nu,income,own_price", [
        (0.03, -0.01, 0.96, 0.75, -0.25),
        (0.17, -0.05, 0.83, 1.00, -0.294),
        (0.01, -0.04, 0.97, 0.333, -1.333),
    ])
    def test_long_run_elasticities(self, gdp, price, nu, income, own_price):
        values = dict.fromkeys(COEFS, 0.0)
        values.update({"nu": nu, "gamma[log_gdp]": gdp, "gamma[log_price_lag1]": price, "sigma_e": 0.1})
        table = elasticity_table(point_draws(values)).set_index(["parameter", "horizon"])
        assert table.loc[("gamma[log_gdp]", "short_run"), "mean"] == pytest.approx(gdp)
        assert table.loc[("gamma[log_gdp]", "long_run"), "mean"] == pytest.approx(income, abs=0.01)
        assert table.loc[("gamma[log_price_lag1]", "long_run"), "mean"] == pytest.approx(own_price, abs=0.01)


class TestSummaries:
    def test_summary_columns_and_values(self):
        rng = np.random.default_rng(0)
        draws = PosteriorDraws(rng.normal(size=(4, 200, 2)), {}, ["a", "b"])
        table = summarize(draws)
        assert list(table.columns) == SUMMARY_COLUMNS
        assert table.loc[0, "mean"] == pytest.approx(draws.column("a").mean())
        assert table.loc[1, "sd"] == pytest.approx(draws.column("b").std(ddof=1))
        assert (table["q2.5"] < table["median"]).all() and (table["median"] < table["q97.5"]).all()

    def test_constant_parameter_has_no_rhat(self):
        values = dict.fromkeys(COEFS, 0.5)
        table = summarize(point_draws(values), ["nu"])
        assert math.isnan(table.loc[0, "rhat"])
        assert table.loc[0, "sd"] == 0.0

    def test_empty(self):
        with pytest.raises(EmptyDraws):
            summarize(PosteriorDraws(np.zeros((1, 0, 1)), {}, ["a"]))

    def test_group_effects(self, small_design):
        draws, spec = fitted_draws(small_design, Variant.RandomSlopes)
        effects, R = group_effects_table(draws)
        assert len(effects) == spec.N * spec.D
        assert set(effects["country"]) == set(small_design.countries)
        assert R.shape == (spec.D, spec.D)
        np.testing.assert_allclose(np.diag(R.to_numpy()), 1.0)
        np.testing.assert_allclose(R.to_numpy(), R.to_numpy().T)
        assert (effects["q5"] <= effects["q95"]).all()

    def test_model_spec_needs_metadata(self):
        with pytest.raises(ValidationError, match="specification"):
            model_spec(point_draws(dict.fromkeys(COEFS, 0.1)))


class TestCounterfactual:
    def expected_pct(self, small_sim, design, beta, delta_t, year, country):
        tg = small_sim.temperature
        mask = (tg.records["timestamp"].dt.year == year).to_numpy()
        grid = type(tg)(tg.records[mask].reset_index(drop=True), tg.cell_meta)
        pg, cm, scheme = small_sim.population_grid, small_sim.country_map, small_sim.scheme
        base = compute_exposure(grid, pg, cm, scheme).row(country, year)
        warm = compute_exposure(grid.shifted(delta_t), pg, cm, scheme).row(country, year)
        dF = (warm - base)[list(design.retained_bins)]
        return math.expm1(float(beta @ dF)) * 100.0

    def test_mean_mode_matches_exposure_shift(self, small_sim, small_design):
        spec = ModelSpec.from_design(small_design, Variant.Pooled)
        beta = np.linspace(-0.2, 0.3, spec.K_eff)
        pins = {f"beta[{b}]": v for b, v in zip(small_design.exposure_labels, beta)}
        pins["nu"] = 0.5
        draws, _ = fitted_draws(small_design, Variant.Pooled, pins)
        result = warming_counterfactual(
            draws, small_sim.temperature, small_sim.population_grid, small_sim.country_map,
            small_sim.scheme, small_design, delta_t=1.0, base_year=2002,
        )
        table = result.table.set_index("country")
        assert list(table.index) == list(small_design.countries)
        for country in small_design.countries:
            expected = self.expected_pct(small_sim, small_design, beta, 1.0, 2002, country)
            assert table.loc[country, "pct_change"] == pytest.approx(expected, abs=1e-9)
        base_total = table["baseline_demand"].sum()
        cf_total = table["counterfactual_demand"].sum()
        assert result.total_pct_change == pytest.approx((cf_total - base_total) / base_total * 100)

    def test_no_warming_changes_nothing(self, small_sim, small_design):
        draws, _ = fitted_draws(small_design, Variant.RandomSlopes, seed=1)
        result = warming_counterfactual(
            draws, small_sim.temperature, small_sim.population_grid, small_sim.country_map,
            small_sim.scheme, small_design, delta_t=0.0, base_year=2001, mode="full",
        )
        np.testing.assert_allclose(result.table["pct_change"], 0.0, atol=1e-12)
        assert result.total_pct_change == pytest.approx(0.0, abs=1e-10)
        assert {"pct_q2.5", "pct_q97.5"} <= set(result.table.columns)

    def test_absolute_levels_use_population(self, small_sim, small_design):
        draws, _ = fitted_draws(small_design, Variant.Pooled, seed=2)
        args = (draws, small_sim.temperature, small_sim.population_grid, small_sim.country_map,
                small_sim.scheme, small_design, 1.0, 2003)
        per_capita = warming_counterfactual(*args).table.set_index("country")
        absolute = warming_counterfactual(*args, absolute=True).table.set_index("country")
        pop = small_sim.population.set_index(["country", "year"])["value"]
        for country in small_design.countries:
            assert absolute.loc[country, "baseline_demand"] == pytest.approx(
                per_capita.loc[country, "baseline_demand"] * pop[(country, 2003)])
        pd.testing.assert_series_equal(absolute["pct_change"], per_capita["pct_change"])

    def test_base_year_outside_grid(self, small_sim, small_design):
        draws, _ = fitted_draws(small_design, Variant.Pooled)
        with pytest.raises(YearNotCovered):
            warming_counterfactual(
                draws, small_sim.temperature, small_sim.population_grid, small_sim.country_map,
                small_sim.scheme, small_design, 1.0, 1980,
            )

    def test_unknown_mode_is_rejected_before_any_work(self, small_sim, small_design):
        draws, _ = fitted_draws(small_design, Variant.Pooled)
        with pytest.raises(ValidationError, match="unknown counterfactual mode"):
            warming_counterfactual(
                draws, small_sim.temperature, small_sim.population_grid, small_sim.country_map,
                small_sim.scheme, small_design, 1.0, 1980, mode="median",
            )


class TestRefits:
    def test_window_wider_than_panel(self, small_sim):
        panel = assemble_panel(small_sim.energy, small_sim.gdp, small_sim.price, small_sim.exposure)
        with pytest.raises(WindowTooWide):
            rolling_windows(panel, window=small_sim.config.n_years + 1)

    def test_rolling_windows_slide_by_one_year(self, small_sim):
        panel = assemble_panel(small_sim.energy, small_sim.gdp, small_sim.price, small_sim.exposure)
        config = SamplerConfig(n_chains=1, n_warmup=30, n_samples=12, seed=1, threads=1)
        results = rolling_windows(panel, config, window=4, variant=Variant.Pooled)
        assert [(r.first_year, r.last_year) for r in results] == [(2000, 2003), (2001, 2004)]

    def test_later_windows_run_a_shorter_warmup(self, small_sim, monkeypatch):
        seen = []

        def recording_run_chains(design, spec, config=None, warm_start=None):
            seen.append((config.n_warmup, warm_start is not None))
            return run_chains(design, spec, config, warm_start=warm_start)

        monkeypatch.setattr(report, "run_chains", recording_run_chains)
        panel = assemble_panel(small_sim.energy, small_sim.gdp, small_sim.price, small_sim.exposure)
        config = SamplerConfig(n_chains=1, n_warmup=400, n_samples=10, seed=4, threads=1)
        results = rolling_windows(panel, config, window=4, variant=Variant.Pooled)
        assert seen == [(400, False), (150, True)]
        frame = windows_frame(results)
        assert list(frame.columns[:3]) == ["first_year", "last_year", "parameter"]
        assert frame["parameter"].str.startswith("beta[").all()

    def test_prior_sensitivity_fits_every_preset(self, small_design):
        config = SamplerConfig(n_chains=1, n_warmup=30, n_samples=12, seed=2, threads=1)
        table = prior_sensitivity(small_design, ("default", "tight"), config=config, variant=Variant.Pooled)
        assert sorted(table["fit"].unique()) == ["default/eta=2", "tight/eta=2"]
        assert len(table) == 2 * small_design.K_eff
        assert (table["q5"] <= table["q95"]).all()
