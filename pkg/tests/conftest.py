import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import conicflow  # noqa: E402
from conicflow import cli  # noqa: E402
from conicflow import flow as fl  # noqa: E402
from conicflow import geometry as geo  # noqa: E402
from conicflow.marked_sphere import Divisor  # noqa: E402

CONFIG_DIR = os.path.join(os.path.dirname(conicflow.__file__), "configs")


def equatorial(lons_deg):
    return [
        [math.cos(math.radians(l)), math.sin(math.radians(l)), 0.0] for l in lons_deg
    ]


SHIPPED = {
    "stable": ([0.5, 0.5, 0.5], [0, 120, 240]),
    "semistable": ([0.3, 0.3, 0.6], [-25, 25, 180]),
    "unstable": ([0.1, 0.2, 0.8], [-25, 25, 180]),
}


def shipped_divisor(name):
    weights, lons = SHIPPED[name]
    return Divisor(weights, equatorial(lons))


def shipped_config_path(name):
    return os.path.join(CONFIG_DIR, f"{name}.cfg")


def shipped_config(name, **overrides):
    cfg = fl.parse_config_file(shipped_config_path(name))
    return replace(cfg, **overrides) if overrides else cfg


@pytest.fixture(scope="session")
def round_state():
    grid = geo.build_grid(48, 96)
    return geo.make_state(geo.background_metric(grid, None, 0.1))


@pytest.fixture(scope="session")
def shipped_results(tmp_path_factory):
    """The three production runs, executed through the CLI surface
    (manifest + trace + report), at the acceptance parameters."""
    root = tmp_path_factory.mktemp("shipped")
    out = {}
    for name in SHIPPED:
        config = shipped_config(name)
        out[name] = cli.execute_run(config, str(root / name), config_hash=name)
    return out


@pytest.fixture(scope="session")
def shipped_runs(shipped_results):
    return {name: res["trace"] for name, res in shipped_results.items()}


@pytest.fixture(scope="session")
def unstable_eps_sweep(shipped_results, tmp_path_factory):
    """Epsilon-halving pair for the unstable config: the shipped eps = 0.05
    run plus one at eps = 0.1."""
    root = tmp_path_factory.mktemp("eps_sweep")
    coarse = cli.execute_run(
        shipped_config("unstable", eps=0.1), str(root / "eps0.1"), config_hash="eps0.1"
    )
    return {0.1: coarse["trace"], 0.05: shipped_results["unstable"]["trace"]}


@pytest.fixture(scope="session")
def soliton_axis_result(tmp_path_factory):
    """The shipped axisymmetric soliton orbit-tracking run (criterion 9)."""
    root = tmp_path_factory.mktemp("axis")
    config = fl.parse_config_file(shipped_config_path("soliton_axis"))
    return cli.execute_run(config, str(root / "soliton"), config_hash="soliton_axis")


@pytest.fixture(scope="session")
def football_control():
    from conicflow import diagnostics as diag

    return diag.football_control_state(64, 128, 0.55, 0.05)
