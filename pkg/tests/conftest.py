"""Shared fixtures: small systems and the (expensive) desk benchmark runs."""
from __future__ import annotations

import time

import numpy as np
import pytest

from msblackoil import blackoil as bo
from msblackoil import runner
from msblackoil.config import SimulationConfig
from msblackoil.fluid_rock import FluidModel, RockType
from msblackoil.grid import build_grid
from msblackoil.mixed_fem import fine_mesh, lumped_flux_space

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


def make_fine_system(nx, ny, dx=1.5, ratio=1, perm=None, seed=0, fluid=None, rock=None,
                     wells=True):
    """Fine two-point system with the corner injector/producer pair."""
    grid = build_grid(nx, ny, dx, dx, ratio)
    mesh = fine_mesh(grid)
    fluid = fluid or FluidModel()
    rock = rock or RockType()
    spec = [bo.WellSpec("rate-injector", 0, 1.0),
            bo.WellSpec("pressure-producer", grid.n_fine - 1, 2500.0)] if wells else []
    wt = bo.apply_wells(spec, grid, mesh, fluid)
    if perm is None:
        perm = np.exp(np.random.default_rng(seed).normal(3.0, 1.0, grid.n_fine))
    space = lumped_flux_space(mesh, perm, wt.producer_faces, wt.producer_pressure)
    cells = bo.rock_cell_model([rock], np.zeros(mesh.n_cells), np.full(mesh.n_cells, rock.porosity))
    return grid, mesh, bo.BlackOilSystem(fluid, space, cells, mesh.volume, wt, mesh)


@pytest.fixture(scope="session")
def desk_config():
    return SimulationConfig()


@pytest.fixture(scope="session")
def desk_problem(desk_config):
    return runner.build_problem(desk_config)


def timed_run(config, problem, **kwargs):
    """Run ``config`` and attach the wall-clock time (s) as ``elapsed``."""
    t0 = time.perf_counter()
    result = runner.simulate(config, problem, **kwargs)
    result.elapsed = time.perf_counter() - t0
    return result


@pytest.fixture(scope="session")
def fine_run(desk_config, desk_problem):
    return timed_run(desk_config, desk_problem)


@pytest.fixture(scope="session")
def amr_run(desk_config, desk_problem):
    return timed_run(desk_config.replace("method", name="homog-amr"), desk_problem)


@pytest.fixture(scope="session")
def gmsfem_run(desk_config, desk_problem):
    return timed_run(desk_config.replace("method", name="gmsfem"), desk_problem)


@pytest.fixture(scope="session")
def full_bases(desk_problem):
    from msblackoil import gmsfem as gm
    return gm.build_spectral_bases(desk_problem.grid, desk_problem.perm, n_keep=None)
