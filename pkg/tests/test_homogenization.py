import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msblackoil import fluid_rock as fr
from msblackoil import homogenization as hm
from msblackoil.errors import DataError
from msblackoil.grid import build_grid
from msblackoil.mixed_fem import coarse_mesh

ROCK = fr.RockType()
FLUID = fr.FluidModel()


def test_homogeneous_block_has_no_corrector():
    sol = hm.solve_cell_problem(np.full((5, 4), 7.0), 1.0, 2.0)
    assert np.abs(sol.correctors).max() < 1e-12
    assert np.allclose(hm.effective_tensor(sol), 7.0 * np.eye(2), rtol=1e-13)


def test_layered_corrector_is_piecewise_linear():
    coef = np.where(np.arange(6)[:, None] % 2 == 0, 1.0, 100.0) * np.ones((6, 4))
    sol = hm.solve_cell_problem(coef, 1.0, 1.0)
    chi_x, chi_y = sol.correctors
    assert np.abs(chi_x).max() < 1e-12
    assert np.abs(chi_y - chi_y[:, :1]).max() < 1e-12          # depends on the row only
    # the corrected flux across every horizontal face is the same constant
    fy = hm._face_coefficients(sol.coefficient)[1]
    flux = fy * ((np.roll(chi_y, -1, axis=0) - chi_y) + 1.0)
    assert np.allclose(flux, flux[0, 0], rtol=1e-12)
    assert np.allclose(hm.effective_tensor(sol), np.diag([50.5, 200 / 101]), rtol=1e-12)


def test_scaling_the_coefficient_scales_the_tensor():
    a = np.exp(np.random.default_rng(4).normal(0, 1, (6, 6)))
    t1 = hm.effective_coefficient(a, 1.0, 1.0)
    t2 = hm.effective_coefficient(2 * a, 1.0, 1.0)
    assert np.allclose(t2, 2 * t1, rtol=1e-12)


def test_degenerate_and_invalid_coefficients():
    sol = hm.solve_cell_problem(np.zeros((3, 3)), 1.0, 1.0)
    assert sol.degenerate and np.array_equal(hm.effective_tensor(sol), np.zeros((2, 2)))
    with pytest.raises(DataError):
        hm.solve_cell_problem(-np.ones((2, 2)), 1.0, 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_tensor_is_symmetric_and_bounded(nx, ny, seed):
    a = np.exp(np.random.default_rng(seed).normal(0, 1.5, (ny, nx)))
    t = hm.effective_tensor(hm.solve_cell_problem(a, 1.0, 1.0), symmetrize=False)
    lo, hi = hm.mean_bounds(a)
    assert abs(t[0, 1] - t[1, 0]) <= 1e-10 * np.abs(t).max()
    ev = np.linalg.eigvalsh(0.5 * (t + t.T))
    assert lo * (1 - 1e-10) <= ev.min() and ev.max() <= hi * (1 + 1e-10)


def test_effective_porosity_example():
    mean, per = hm.effective_porosity([0.1, 0.2, 0.3, 0.4], [0, 0, 1, 1], 3)
    assert mean == pytest.approx(0.25)
    assert per[:2] == pytest.approx([0.15, 0.35]) and np.isnan(per[2])
    with pytest.raises(ValueError):
        hm.effective_porosity([], [])


def test_capillary_match_identity_and_clamping():
    res = hm.capillary_equilibrium_match([ROCK, ROCK], "cow", 0, 0.45)
    assert np.allclose(res.saturation, 0.45, atol=1e-9) and not res.clamped.any()
    loose = fr.RockType(p_to=5.0)
    res = hm.capillary_equilibrium_match([ROCK, loose], "cow", 0, 0.7)
    # same capillary value in both rocks
    assert not res.clamped.any()
    assert fr.capillary_pressure(loose, "cow", res.saturation[1]) == \
        pytest.approx(fr.capillary_pressure(ROCK, "cow", 0.7), rel=1e-8)
    # a rock whose entry pressure exceeds the target is pinned at full saturation
    tight = fr.RockType(p_to=40.0)
    res = hm.capillary_equilibrium_match([ROCK, tight], "cow", 0, 0.7)
    assert res.clamped[1] and res.saturation[1] == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.25, 0.95), st.floats(0.25, 0.95))
def test_capillary_match_is_monotone(a, b):
    lo, hi = sorted((a, b))
    rocks = [ROCK, fr.RockType(p_to=20.0, lambda_ow=0.5)]
    s_lo = hm.capillary_equilibrium_match(rocks, "cow", 0, lo).saturation
    s_hi = hm.capillary_equilibrium_match(rocks, "cow", 0, hi).saturation
    assert np.all(s_lo <= s_hi + 1e-9)


def test_effective_saturation_example():
    s = hm.effective_saturation([0.5, 0.5], [0.1, 0.3], 0.2, [0.2, 0.4])
    assert s == pytest.approx(0.35, rel=1e-14)
    assert hm.effective_saturation([1.0, 0.0], [0.2, 0.0], 0.2, [0.3, np.nan]) == pytest.approx(0.3)


def test_global_pressure_identities():
    c = hm.global_pressure_curves(FLUID, ROCK, 201, g0=3.0)
    assert c.g_o[0] == 3.0
    assert np.array_equal(c.g_w, c.g_o - c.pcow)
    assert np.array_equal(c.g_g, c.g_o + c.pcgo)
    with pytest.raises(ValueError):
        hm.global_pressure_curves(FLUID, ROCK, s_g=0.8)


def test_global_pressure_converges_at_second_order():
    """Away from the singular end slope the trapezoid rule is second order."""
    ref = hm.global_pressure_curves(FLUID, ROCK, 64001)
    mid = ref.g_o[32000]
    errs = np.array([abs(hm.global_pressure_curves(FLUID, ROCK, n).g_o[(n - 1) // 2] - mid)
                     for n in (51, 101, 201)])
    rates = np.log2(errs[:-1] / errs[1:])
    assert np.all(rates > 1.9), rates


def _two_rock_grid():
    grid = build_grid(4, 4, 1.0, 1.0, 2)
    rng = np.random.default_rng(3)
    perm = np.exp(rng.normal(3, 1, grid.n_fine))
    phi = rng.uniform(0.15, 0.25, grid.n_fine)
    rock_index = (np.arange(grid.n_fine) % 4 >= 2).astype(int)   # right half is rock 1
    rock_index[grid.fine_cells_of_coarse(0)[0]] = 1                # block 0 mixes both
    return grid, perm, phi, rock_index, [ROCK, fr.RockType(p_to=20.0, krw_max=0.5)]


def test_tables_are_deterministic_and_round_trip(tmp_path):
    grid, perm, phi, rock_index, rocks = _two_rock_grid()
    a = hm.build_effective_tables(grid, perm, phi, rock_index, rocks, n_samples=7)
    b = hm.build_effective_tables(grid, perm, phi, rock_index, rocks, n_samples=7)
    path = tmp_path / "tables.txt"
    hm.write_tables(a, path)
    c = hm.read_tables(path)
    for x, y, z in zip(a, b, c):
        assert x.porosity == y.porosity == z.porosity
        assert np.array_equal(x.permeability, z.permeability)
        for ph in hm.TABLE_PHASES:
            assert np.array_equal(x.s_eff[ph], y.s_eff[ph]) and np.array_equal(x.s_eff[ph], z.s_eff[ph])
            assert np.array_equal(x.tensors[ph], z.tensors[ph])
        assert np.array_equal(x.pcow, z.pcow) and np.array_equal(x.pcgo, z.pcgo)
    assert np.array_equal(hm.coarse_permeability(a), hm.coarse_permeability(c))


def test_corrupt_table_file(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("porosity 0.2\n")
    with pytest.raises(DataError, match="line 1"):
        hm.read_tables(path)


def test_single_rock_table_reproduces_fine_curves():
    grid = build_grid(4, 4, 1.0, 1.0, 2)
    perm = np.exp(np.random.default_rng(8).normal(3, 1, grid.n_fine))
    phi = np.full(grid.n_fine, 0.2)
    tables = hm.build_effective_tables(grid, perm, phi, np.zeros(grid.n_fine, int), [ROCK])
    table = tables[0]
    for ph in hm.TABLE_PHASES:
        exact = fr.relative_permeability(ROCK, ph, table.s_eff[ph])
        assert np.allclose(table.relative_mobility(ph), exact[:, None], rtol=1e-8, atol=1e-12)
    assert np.allclose(table.pcow, fr.capillary_pressure(ROCK, "cow", table.s_eff["water"]), rtol=1e-8)
    mesh = coarse_mesh(grid)
    auto = hm.coarse_cell_model(mesh, phi, np.zeros(grid.n_fine, int), [ROCK], tables)
    forced = hm.coarse_cell_model(mesh, phi, np.zeros(grid.n_fine, int), [ROCK], tables, mode="table")
    s_w = np.full(mesh.n_cells, table.s_eff["water"][3])
    s_g = np.full(mesh.n_cells, ROCK.s_gr)
    s_o = 1 - s_w - s_g
    a, b = auto.evaluate(s_o, s_w, s_g), forced.evaluate(s_o, s_w, s_g)
    assert np.allclose(a.kr[1], b.kr[1], rtol=1e-8, atol=1e-12)
    assert np.allclose(auto.porosity, 0.2)


def test_mixed_block_requires_tables():
    grid, perm, phi, rock_index, rocks = _two_rock_grid()
    with pytest.raises(ValueError, match="tables"):
        hm.coarse_cell_model(coarse_mesh(grid), phi, rock_index, rocks)
    with pytest.raises(ValueError):
        hm.coarse_cell_model(coarse_mesh(grid), phi, rock_index, rocks, mode="magic")
