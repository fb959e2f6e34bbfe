import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msblackoil import adaptivity as ad
from msblackoil.grid import build_grid
from msblackoil.mixed_fem import ActiveMesh, coarse_mesh, fine_mesh


def test_jump_indicator_examples():
    g = build_grid(3, 1, 1.0, 1.0, 1)
    mesh = fine_mesh(g)
    assert np.array_equal(ad.saturation_jump_indicator([0.3, 0.3, 0.3], mesh), np.zeros(3))
    assert np.allclose(ad.saturation_jump_indicator([0.2, 0.5, 0.4], mesh), [0.3, 0.3, 0.1])


def test_jump_indicator_on_mixed_mesh_sees_interface():
    g = build_grid(4, 2, 1.0, 1.0, 2)
    mesh = ActiveMesh(g, [True, False])
    s = np.full(mesh.n_cells, 0.3)
    s[mesh.coarse_to_active[1]] = 0.6
    ind = ad.saturation_jump_indicator(s, mesh)
    touching = np.unique(mesh.face_left[mesh.face_is_interface])
    assert np.allclose(ind[touching], 0.3) and ind[mesh.coarse_to_active[1]] == pytest.approx(0.3)


def test_buffer_region_clips_at_boundary():
    g = build_grid(8, 8, 1.0, 1.0, 2)     # 4 x 4 coarse
    assert ad.buffer_region(g, [0], 1).tolist() == [0, 1, 4, 5]
    assert ad.buffer_region(g, [], 1).size == 0
    assert ad.buffer_region(g, [5], 0).tolist() == [5]
    assert ad.buffer_region(g, [5], 5).size == 16


def test_mark_transient():
    g = build_grid(8, 8, 1.0, 1.0, 2)
    mesh = coarse_mesh(g)
    ind = np.zeros(16)
    ind[10] = 0.5
    assert ad.mark_transient(ind, mesh, 0.0).cells.size == 16
    assert ad.mark_transient(ind, mesh, 1.0).cells.size == 0
    assert ad.mark_transient(ind, mesh, 1.0, pinned=[15]).cells.tolist() == [15]
    assert ad.mark_transient(ind, mesh, 0.1, buffer=0).cells.tolist() == [10]
    assert ad.mark_transient(ind, mesh, 0.1, buffer=1).cells.tolist() == [5, 6, 7, 9, 10, 11, 13, 14, 15]


def test_residual_indicator_single_cell():
    g = build_grid(4, 4, 1.0, 2.0, 2)
    r = np.zeros((3, g.n_fine))
    f = g.fine_cells_of_coarse(3)[1]
    r[1, f] = 5.0
    ind = ad.residual_indicator(g, r)
    assert ind[3] == pytest.approx(5.0 / np.sqrt(g.fine_volume), rel=1e-15)
    assert np.count_nonzero(ind) == 1


def test_select_fine_region():
    assert ad.select_fine_region([1.0, 3.0, 2.0, 3.0], 1.0).cells.tolist() == [1, 3]
    assert ad.select_fine_region([1.0, 3.0, 2.0], 0.5).cells.tolist() == [1, 2]
    assert ad.select_fine_region([0.0, 0.0], 0.5).cells.size == 0
    for bad in (0.0, 1.5, -0.1):
        with pytest.raises(ValueError):
            ad.select_fine_region([1.0], bad)


indicators = st.lists(st.floats(0.0, 1e3), min_size=1, max_size=30)


@settings(max_examples=100, deadline=None)
@given(indicators, st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_selection_is_monotone_in_theta(ind, a, b):
    lo, hi = sorted((a, b))
    small = set(ad.select_fine_region(ind, hi).cells)
    big = set(ad.select_fine_region(ind, lo).cells)
    assert small <= big
    if max(ind) > 0:
        assert int(np.argmax(ind)) in small


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=16, max_size=16), st.floats(0.0, 1.0),
       st.floats(0.0, 1.0))
def test_marking_is_monotone_in_eps(ind, a, b):
    mesh = coarse_mesh(build_grid(8, 8, 1.0, 1.0, 2))
    lo, hi = sorted((a, b))
    assert set(ad.mark_transient(ind, mesh, hi).cells) <= set(ad.mark_transient(ind, mesh, lo).cells)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_residual_indicator_is_homogeneous(seed, c):
    g = build_grid(4, 6, 1.0, 1.0, 2)
    r = np.random.default_rng(seed).normal(size=(3, g.n_fine))
    assert np.allclose(ad.residual_indicator(g, c * r), c * ad.residual_indicator(g, r), rtol=1e-12)
