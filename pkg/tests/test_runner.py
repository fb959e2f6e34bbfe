import numpy as np
import pytest

from msblackoil import runner
from msblackoil.config import SimulationConfig
from msblackoil.errors import DataError


def _small(method="fine", **method_kw):
    cfg = (SimulationConfig()
           .replace("grid", nx_fine=20, ny_fine=6, refinement_ratio=2)
           .replace("permeability", source="uniform", value=80.0)
           .replace("schedule", end_time=3.0, snapshot_times=(1.0, 3.0)))
    return cfg.replace("method", name=method, **method_kw)


def test_fine_run_conserves_every_step(tmp_path):
    cfg = _small()
    result = runner.simulate(cfg, output_dir=tmp_path)
    assert result.report.time[-1] == pytest.approx(3.0)
    assert result.max_conservation_error <= 1e-10
    assert result.report.rates[1:, 1].min() > 0          # oil is produced
    assert sorted(result.snapshots) == [1.0, 3.0]
    names = {p.name for p in tmp_path.iterdir()}
    assert "production.csv" in names and "fields_t0001p000.vtk" in names
    assert "s_w_t0003p000.csv" in names and not any(n.startswith("region") for n in names)


def test_uniform_adaptive_run_without_refinement_stays_coarse():
    cfg = _small("homog-amr", eps_adap=1e9, pin_wells=False)
    problem = runner.build_problem(cfg)
    result = runner.simulate(cfg, problem)
    assert all(s.n_refined == 0 and s.n_cells == problem.grid.n_coarse for s in result.steps)
    assert result.max_conservation_error <= 1e-10


def test_zero_threshold_adaptive_run_equals_fine_run():
    fine = runner.simulate(_small())
    amr = runner.simulate(_small("homog-amr", eps_adap=0.0))
    assert np.array_equal(fine.report.rates, amr.report.rates)


def test_multiscale_run_writes_regions(tmp_path):
    result = runner.simulate(_small("gmsfem"), output_dir=tmp_path)
    assert result.max_conservation_error <= 1e-10
    assert (tmp_path / "region_t0003p000.csv").exists()


def test_permeability_shape_is_checked():
    with pytest.raises(DataError, match="shape"):
        runner.build_problem(_small(), perm=np.ones(7))
