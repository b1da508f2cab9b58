"""Pytest configuration for thermopool tests."""
import sys
from pathlib import Path

import pytest

# Add project root to Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from thermopool.core.panel import assemble_panel, build_design  # noqa: E402
from thermopool.core.simulate import SimulationConfig, simulate, write_simulation  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running sampler checks, enabled with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def small_sim():
    """Four countries, five years; enough for pipeline tests that do not sample long."""
    return simulate(SimulationConfig(n_countries=4, n_years=5, cells_per_country=2, days_per_year=4, seed=7))


@pytest.fixture(scope="session")
def small_sim_dir(small_sim, tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    write_simulation(small_sim, out)
    return out


@pytest.fixture(scope="session")
def small_design(small_sim):
    panel = assemble_panel(small_sim.energy, small_sim.gdp, small_sim.price, small_sim.exposure)
    return build_design(panel)
