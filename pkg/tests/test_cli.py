"""End-to-end tests of the command-line subcommands."""
import json

import numpy as np
import pandas as pd
import pytest

from thermopool.cli import design_path_for, main, read_config_file
from thermopool.core.errors import ValidationError
from thermopool.core.exposure import ExposureTable, compute_exposure, make_bin_scheme, replication_scheme
from thermopool.core.gridio import load_grid_dir
from thermopool.core.simulate import SimulationConfig, simulate, write_simulation

FAST_SAMPLER = ["--chains", "2", "--warmup", "40", "--samples", "20", "--threads", "1"]


def panel_flags(sim_dir, exposure):
    return [
        "--energy", str(sim_dir / "energy.csv"),
        "--gdp", str(sim_dir / "gdp.csv"),
        "--price", str(sim_dir / "price.csv"),
        "--exposure", str(exposure),
    ]


@pytest.fixture(scope="module")
def workspace(small_sim_dir, tmp_path_factory):
    """Exposure plus two short fits shared by the diagnose and report tests."""
    out = tmp_path_factory.mktemp("cli")
    exposure = out / "exposure.csv"
    assert main(["exposure", "--grid-dir", str(small_sim_dir / "grid"), "--out", str(exposure), "--threads", "1"]) == 0
    for variant in ("pooled", "random_intercepts"):
        code = main(["fit", *panel_flags(small_sim_dir, exposure), "--variant", variant, *FAST_SAMPLER,
                     "--seed", "3", "--csv", "--out", str(out / f"{variant}.bin")])
        assert code == 0
    return out


class TestExitCodes:
    @pytest.mark.parametrize("argv", [
        ["nonsense"],
        ["exposure", "--bogus"],
        ["exposure", "--grid-dir", "somewhere"],
        [],
        ["report", "--out", "x"],
    ])
    def test_usage_errors_exit_with_one(self, argv):
        assert main(argv) == 1

    def test_version(self, capsys):
        assert main(["--version"]) == 0
        assert "thermopool" in capsys.readouterr().out

    def test_missing_grid_directory(self, tmp_path):
        assert main(["exposure", "--grid-dir", str(tmp_path / "absent"), "--out", str(tmp_path / "e.csv")]) == 1

    def test_invalid_width(self, small_sim_dir, tmp_path):
        argv = ["exposure", "--grid-dir", str(small_sim_dir / "grid"), "--width", "0", "--out", str(tmp_path / "e.csv")]
        assert main(argv) == 1

    def test_unknown_variant(self, small_sim_dir, workspace, tmp_path):
        argv = ["fit", *panel_flags(small_sim_dir, workspace / "exposure.csv"), "--variant", "mixture",
                "--out", str(tmp_path / "d.bin")]
        assert main(argv) == 1


class TestExposureCommand:
    def test_matches_library_result(self, small_sim_dir, workspace):
        table = ExposureTable.from_frame(pd.read_csv(workspace / "exposure.csv", dtype={"country": str}))
        tg, pg, cm = load_grid_dir(small_sim_dir / "grid")
        direct = compute_exposure(tg, pg, cm, make_bin_scheme(3.5), threads=1)
        assert table.keys == direct.keys
        np.testing.assert_array_equal(table.values, direct.values)
        manifest = json.loads((workspace / "exposure.csv.manifest.json").read_text())
        assert manifest["command"] == "exposure"
        assert any(path.endswith("temperature.csv") for path in manifest["input_digests"])

    def test_all_widths(self, small_sim_dir, tmp_path):
        out = tmp_path / "exp.csv"
        assert main(["exposure", "--grid-dir", str(small_sim_dir / "grid"), "--all-widths",
                     "--threads", "1", "--out", str(out)]) == 0
        assert sorted(p.name for p in tmp_path.glob("exp_w*.csv")) == sorted(
            f"exp_w{w:g}.csv" for w in (1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0))

    def test_day_counts(self, small_sim_dir, small_sim, tmp_path):
        out = tmp_path / "days.csv"
        assert main(["exposure", "--grid-dir", str(small_sim_dir / "grid"), "--daycounts", "--out", str(out)]) == 0
        table = ExposureTable.from_frame(pd.read_csv(out, dtype={"country": str}))
        assert table.scheme.K == 9
        np.testing.assert_array_equal(table.values.sum(axis=1), small_sim.config.days_per_year)

    def test_config_file_sets_defaults(self, small_sim_dir, tmp_path):
        cfg = tmp_path / "exposure.cfg"
        cfg.write_text("# wide bins\nwidth = 5.0\nthreads = 1\n")
        out = tmp_path / "e.csv"
        assert main(["exposure", "--config", str(cfg), "--grid-dir", str(small_sim_dir / "grid"), "--out", str(out)]) == 0
        assert ExposureTable.from_frame(pd.read_csv(out, dtype={"country": str})).scheme.K == 9
        assert main(["exposure", "--config", str(cfg), "--width", "3.5",
                     "--grid-dir", str(small_sim_dir / "grid"), "--out", str(out)]) == 0
        assert ExposureTable.from_frame(pd.read_csv(out, dtype={"country": str})).scheme.K == 12

    def test_config_file_with_unknown_key(self, small_sim_dir, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("colour = red\n")
        assert main(["exposure", "--config", str(cfg), "--grid-dir", str(small_sim_dir / "grid"),
                     "--out", str(tmp_path / "e.csv")]) == 1

    def test_read_config_file(self, tmp_path):
        cfg = tmp_path / "a.cfg"
        cfg.write_text("day-window = 0:24  # whole day\n\nbands = 0, 10\n")
        assert read_config_file(cfg) == {"day_window": "0:24", "bands": "0, 10"}
        cfg.write_text("width 3\n")
        with pytest.raises(ValidationError, match=":1:"):
            read_config_file(cfg)


class TestModelCommands:
    def test_fit_writes_draws_design_and_manifest(self, workspace):
        draws = workspace / "pooled.bin"
        assert draws.exists()
        assert design_path_for(draws) == workspace / "pooled.design.csv"
        assert design_path_for(draws).exists()
        assert (workspace / "pooled.csv").exists()
        manifest = json.loads((workspace / "pooled.bin.manifest.json").read_text())
        assert manifest["seed"] == 3
        assert manifest["flags"]["variant"] == "pooled"

    def test_diagnose(self, workspace, tmp_path):
        assert main(["diagnose", str(workspace / "pooled.bin"), "--ppc", "20", "--prior-predictive", "10",
                     "--out", str(tmp_path)]) == 0
        rhat = pd.read_csv(tmp_path / "rhat_ess.csv")
        assert list(rhat.columns) == ["parameter", "rhat", "ess_bulk", "ess_tail"]
        loo = pd.read_csv(tmp_path / "loo.csv")
        assert {"country", "year", "elpd_loo", "pareto_k"} <= set(loo.columns)
        assert len(pd.read_csv(tmp_path / "ppc.csv")) == len(loo)
        assert (tmp_path / "prior_predictive.csv").exists()
        assert (tmp_path / "run.manifest.json").exists()

    def test_compare(self, workspace, tmp_path):
        assert main(["diagnose", "--compare", str(workspace / "pooled.bin"),
                     str(workspace / "random_intercepts.bin"), "--out", str(tmp_path)]) == 0
        table = pd.read_csv(tmp_path / "compare.csv")
        assert sorted(table["model"]) == ["pooled", "random_intercepts"]
        assert table["elpd_diff"].iloc[0] == 0.0

    def test_report(self, workspace, small_sim_dir, tmp_path):
        argv = ["report", str(workspace / "random_intercepts.bin"), "--koyck", "--elasticities",
                "--group-effects", "--counterfactual", "1.0", "--base-year", "2002",
                "--grid-dir", str(small_sim_dir / "grid"), "--out", str(tmp_path)]
        assert main(argv) == 0
        summary = pd.read_csv(tmp_path / "summary.csv")
        assert summary["parameter"].iloc[:2].tolist() == ["alpha", "nu"]
        koyck = pd.read_csv(tmp_path / "koyck.csv")
        assert set(koyck["horizon"]) == {"short_run", "long_run", "long_run_exact"}
        elasticities = pd.read_csv(tmp_path / "elasticities.csv")
        assert len(elasticities) == 4
        counterfactual = pd.read_csv(tmp_path / "counterfactual.csv")
        assert counterfactual["country"].iloc[-1] == "ALL"
        assert len(counterfactual) == 5
        assert (tmp_path / "group_correlation.csv").exists()

    def test_counterfactual_needs_base_year(self, workspace, small_sim_dir, tmp_path):
        argv = ["report", str(workspace / "pooled.bin"), "--counterfactual", "1.0",
                "--grid-dir", str(small_sim_dir / "grid"), "--out", str(tmp_path)]
        assert main(argv) == 1

    def test_sensitivity(self, workspace, tmp_path):
        argv = ["report", "--sensitivity", str(workspace / "pooled.bin"), str(workspace / "random_intercepts.bin"),
                "--out", str(tmp_path)]
        assert main(argv) == 0
        table = pd.read_csv(tmp_path / "sensitivity.csv")
        assert sorted(table["fit"].unique()) == ["pooled", "random_intercepts"]


class TestOtherCommands:
    def test_census(self, small_sim_dir, small_sim, tmp_path):
        out = tmp_path / "census.csv"
        assert main(["census", "--grid-dir", str(small_sim_dir / "grid"), "--year", "2001", "--out", str(out)]) == 0
        table = pd.read_csv(out)
        assert list(table.columns) == ["band", "population"]
        expected = small_sim.population_grid.counts.query("year == 2001")["population"].sum()
        assert table["population"].sum() == pytest.approx(expected)

    def test_simulate(self, tmp_path):
        argv = ["simulate", "--countries", "3", "--years", "3", "--cells", "1", "--days", "2",
                "--seed", "9", "--out", str(tmp_path)]
        assert main(argv) == 0
        truth = json.loads((tmp_path / "truth.json").read_text())
        assert truth["config"]["n_countries"] == 3
        assert (tmp_path / "grid" / "temperature.csv").exists()
        assert (tmp_path / "run.manifest.json").exists()

    def test_twfe(self, tmp_path):
        sim = simulate(SimulationConfig(n_countries=6, n_years=8, cells_per_country=1, days_per_year=2, seed=3))
        write_simulation(sim, tmp_path)
        rng = np.random.default_rng(0)
        keys = tuple((c, y) for c in sim.country_map.countries for y in range(2000, 2008))
        days = ExposureTable(replication_scheme(), keys, rng.integers(0, 60, size=(len(keys), 9)).astype(float),
                             np.full(len(keys), -1, dtype=np.int64))
        days.to_frame().to_csv(tmp_path / "days.csv", index=False)

        out = tmp_path / "twfe.csv"
        assert main(["twfe", "--panel", str(tmp_path), "--daycounts", str(tmp_path / "days.csv"),
                     "--out", str(out)]) == 0
        table = pd.read_csv(out)
        assert len(table) == 8 + 4
        assert (table["note"] == "clustered by country").all()

        augmented = tmp_path / "twfe_aug.csv"
        assert main(["twfe", "--panel", str(tmp_path), "--daycounts", str(tmp_path / "days.csv"),
                     "--augmented", "--out", str(augmented)]) == 0
        assert pd.read_csv(augmented)["term"].tolist()[-2:] == ["log_y_lag1", "log_price_lag1"]

    def test_twfe_needs_day_counts(self, small_sim_dir, tmp_path):
        assert main(["twfe", "--panel", str(small_sim_dir), "--out", str(tmp_path / "t.csv")]) == 1


def run_pipeline(root):
    sim_dir = root / "sim"
    assert main(["simulate", "--countries", "3", "--years", "4", "--cells", "1", "--days", "2",
                 "--seed", "13", "--out", str(sim_dir)]) == 0
    exposure = root / "exposure.csv"
    assert main(["exposure", "--grid-dir", str(sim_dir / "grid"), "--out", str(exposure)]) == 0
    draws = root / "fit.bin"
    assert main(["fit", *panel_flags(sim_dir, exposure), "--variant", "pooled", "--chains", "2",
                 "--warmup", "40", "--samples", "20", "--threads", "2", "--seed", "8", "--out", str(draws)]) == 0
    assert main(["diagnose", str(draws), "--out", str(root / "diag")]) == 0
    assert main(["report", str(draws), "--out", str(root / "report")]) == 0
    return {
        p.relative_to(root): p.read_bytes()
        for p in sorted(root.rglob("*")) if p.is_file() and not p.name.endswith(".manifest.json")
    }


def test_pipeline_is_byte_identical_across_runs(tmp_path):
    first = run_pipeline(tmp_path / "a")
    second = run_pipeline(tmp_path / "b")
    assert sorted(first) == sorted(second)
    for name, payload in first.items():
        assert payload == second[name], name


@pytest.mark.slow
def test_full_pipeline_on_simulated_data(tmp_path):
    sim_dir = tmp_path / "sim"
    assert main(["simulate", "--seed", "21", "--out", str(sim_dir)]) == 0
    exposure = tmp_path / "exposure.csv"
    assert main(["exposure", "--grid-dir", str(sim_dir / "grid"), "--out", str(exposure)]) == 0
    draws = tmp_path / "fit.bin"
    assert main(["fit", *panel_flags(sim_dir, exposure), "--chains", "4", "--warmup", "500",
                 "--samples", "500", "--seed", "5", "--out", str(draws)]) == 0
    assert main(["diagnose", str(draws), "--out", str(tmp_path / "diag")]) == 0
    rhat = pd.read_csv(tmp_path / "diag" / "rhat_ess.csv")
    core = rhat[rhat["parameter"].isin(["alpha", "nu", "sigma_e"])]
    assert (core["rhat"] < 1.05).all()
    assert main(["report", str(draws), "--koyck", "--elasticities", "--out", str(tmp_path / "report")]) == 0
    truth = json.loads((sim_dir / "truth.json").read_text())["parameters"]
    summary = pd.read_csv(tmp_path / "report" / "summary.csv").set_index("parameter")
    assert summary.loc["nu", "q2.5"] - 0.1 < truth["nu"] < summary.loc["nu", "q97.5"] + 0.1
